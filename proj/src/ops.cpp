#include "cct/ops.hpp"

#include <algorithm>
#include <cmath>

namespace cct {
namespace {

Tensor make_result(Shape s, std::vector<double> v, Tape* tape) {
  Tensor t = from_values(std::move(s), std::move(v));
  t.tape = tape;
  return t;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " differ");
}

void require_rank2(const Tensor& x, const char* op) {
  if (x.shape.size() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(x.shape));
}

inline void axpy_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

AttentionMask full_mask(size_t rows, size_t cols) {
  AttentionMask m;
  m.rows = rows;
  m.cols = cols;
  m.allow.assign(rows * cols, 1);
  return m;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tape* tape = result_tape(a, b);
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  Tensor r = make_result(a.shape, std::move(out), tape);
  if (tape) {
    int na = a.node, nb = b.node;
    r.node = tape->record(r.size(), [na, nb](const std::vector<double>& g, Tape& t) {
      if (na >= 0) axpy_into(t.grad(na), g);
      if (nb >= 0) axpy_into(t.grad(nb), g);
    });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tape* tape = result_tape(a, b);
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  Tensor r = make_result(a.shape, std::move(out), tape);
  if (tape) {
    int na = a.node, nb = b.node;
    r.node = tape->record(r.size(), [na, nb](const std::vector<double>& g, Tape& t) {
      if (na >= 0) axpy_into(t.grad(na), g);
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tape* tape = result_tape(a, b);
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  Tensor r = make_result(a.shape, std::move(out), tape);
  if (tape) {
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    r.node = tape->record(r.size(), [na, nb, da, db](const std::vector<double>& g, Tape& t) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*db)[i];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*da)[i];
      }
    });
  }
  return r;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * s;
  Tensor r = make_result(a.shape, std::move(out), a.tape);
  if (a.tape) {
    int na = a.node;
    r.node = a.tape->record(r.size(), [na, s](const std::vector<double>& g, Tape& t) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
      }
    });
  }
  return r;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require_rank2(x, "add_bias");
  if (b.size() != x.cols())
    throw ShapeError("add_bias: bias " + shape_str(b.shape) + " does not match columns of " + shape_str(x.shape));
  Tape* tape = result_tape(x, b);
  size_t n = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) out[i * c + j] = x.at(i, j) + b.at(j);
  Tensor r = make_result(x.shape, std::move(out), tape);
  if (tape) {
    int nx = x.node, nb = b.node;
    r.node = tape->record(r.size(), [nx, nb, n, c](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) axpy_into(t.grad(nx), g);
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
    });
  }
  return r;
}

namespace {

// C[m x n] += A[m x k] * B[k x n]; accumulation runs over k in increasing
// order so independent straight-line evaluations can match bit-for-bit.
void matmul_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where Bt is [n x k].
void matmul_bt_acc(const double* a, const double* bt, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* bj = bt + j * k;
      double s = 0.0;
      for (size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// C[m x n] += A^T * B where At is [k x m], B is [k x n].
void matmul_at_acc(const double* at, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t p = 0; p < k; ++p) {
    const double* ap = at + p * m;
    const double* bp = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions of " + shape_str(a.shape) + " and " + shape_str(b.shape) + " differ");
  Tape* tape = result_tape(a, b);
  size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  matmul_acc(a.ptr(), b.ptr(), out.data(), m, k, n);
  Tensor r = make_result({m, n}, std::move(out), tape);
  if (tape) {
    int na = a.node, nb = b.node;
    auto da = a.data, db = b.data;
    r.node = tape->record(r.size(), [na, nb, da, db, m, k, n](const std::vector<double>& g, Tape& t) {
      if (na >= 0) matmul_bt_acc(g.data(), db->data(), t.grad(na).data(), m, n, k);  // dA = dC * B^T
      if (nb >= 0) matmul_at_acc(da->data(), g.data(), t.grad(nb).data(), k, m, n);  // dB = A^T * dC
    });
  }
  return r;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i, j);
  Tensor r = make_result({n, m}, std::move(out), a.tape);
  if (a.tape) {
    int na = a.node;
    r.node = a.tape->record(r.size(), [na, m, n](const std::vector<double>& g, Tape& t) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (size_t i = 0; i < m; ++i)
          for (size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      }
    });
  }
  return r;
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) > 0.0 ? x.at(i) : 0.0;
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dx = x.data;
    r.node = x.tape->record(r.size(), [nx, dx](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < g.size(); ++i)
          if ((*dx)[i] > 0.0) gx[i] += g[i];
      }
    });
  }
  return r;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x.at(i)));
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dy = r.data;
    r.node = x.tape->record(r.size(), [nx, dy](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < g.size(); ++i) {
          double y = (*dy)[i];
          gx[i] += g[i] * y * (1.0 - y);
        }
      }
    });
  }
  return r;
}

Tensor tanh_op(const Tensor& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.at(i));
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dy = r.data;
    r.node = x.tape->record(r.size(), [nx, dy](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < g.size(); ++i) {
          double y = (*dy)[i];
          gx[i] += g[i] * (1.0 - y * y);
        }
      }
    });
  }
  return r;
}

Tensor swish(const Tensor& x) {
  std::vector<double> out(x.size());
  for (size_t i = 0; i < out.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-x.at(i)));
    out[i] = x.at(i) * s;
  }
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dx = x.data;
    r.node = x.tape->record(r.size(), [nx, dx](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < g.size(); ++i) {
          double v = (*dx)[i];
          double s = 1.0 / (1.0 + std::exp(-v));
          gx[i] += g[i] * s * (1.0 + v * (1.0 - s));
        }
      }
    });
  }
  return r;
}

Tensor glu(const Tensor& x) {
  require_rank2(x, "glu");
  if (x.cols() % 2 != 0) throw ShapeError("glu: last axis extent " + std::to_string(x.cols()) + " is odd");
  size_t n = x.rows(), c = x.cols() / 2;
  std::vector<double> out(n * c);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      double a = x.at(i, j);
      double b = x.at(i, j + c);
      out[i * c + j] = a / (1.0 + std::exp(-b));
    }
  Tensor r = make_result({n, c}, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dx = x.data;
    r.node = x.tape->record(r.size(), [nx, dx, n, c](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) {
            double a = (*dx)[i * 2 * c + j];
            double b = (*dx)[i * 2 * c + j + c];
            double s = 1.0 / (1.0 + std::exp(-b));
            double go = g[i * c + j];
            gx[i * 2 * c + j] += go * s;
            gx[i * 2 * c + j + c] += go * a * s * (1.0 - s);
          }
      }
    });
  }
  return r;
}

namespace {

void check_finite(const Tensor& x, const char* op) {
  for (size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x.at(i))) throw ValueError(std::string(op) + ": non-finite input");
}

// Softmax of one strided slice, max-stabilized, in index order.
void softmax_slice(const double* x, double* y, size_t n, size_t stride) {
  double mx = x[0];
  for (size_t i = 1; i < n; ++i) mx = std::max(mx, x[i * stride]);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double e = std::exp(x[i * stride] - mx);
    y[i * stride] = e;
    sum += e;
  }
  for (size_t i = 0; i < n; ++i) y[i * stride] /= sum;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  require_rank2(x, "softmax");
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for rank-2");
  check_finite(x, "softmax");
  size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  if (axis == 1) {
    for (size_t i = 0; i < m; ++i) softmax_slice(x.ptr() + i * n, out.data() + i * n, n, 1);
  } else {
    for (size_t j = 0; j < n; ++j) softmax_slice(x.ptr() + j, out.data() + j, m, n);
  }
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dy = r.data;
    r.node = x.tape->record(r.size(), [nx, dy, m, n, axis](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      size_t outer = axis == 1 ? m : n;
      size_t inner = axis == 1 ? n : m;
      size_t ostride = axis == 1 ? n : 1;
      size_t istride = axis == 1 ? 1 : n;
      for (size_t o = 0; o < outer; ++o) {
        const double* ys = dy->data() + o * ostride;
        const double* gs = g.data() + o * ostride;
        double dot = 0.0;
        for (size_t i = 0; i < inner; ++i) dot += ys[i * istride] * gs[i * istride];
        for (size_t i = 0; i < inner; ++i)
          gx[o * ostride + i * istride] += ys[i * istride] * (gs[i * istride] - dot);
      }
    });
  }
  return r;
}

Tensor masked_softmax(const Tensor& x, const AttentionMask& mask) {
  require_rank2(x, "masked_softmax");
  if (mask.rows != x.rows() || mask.cols != x.cols())
    throw ShapeError("masked_softmax: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " does not cover " + shape_str(x.shape));
  check_finite(x, "masked_softmax");
  size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size(), 0.0);
  for (size_t i = 0; i < m; ++i) {
    double mx = -HUGE_VAL;
    for (size_t j = 0; j < n; ++j)
      if (mask.allowed(i, j)) mx = std::max(mx, x.at(i, j));
    if (mx == -HUGE_VAL) throw ValueError("masked_softmax: row " + std::to_string(i) + " has no allowed column");
    double sum = 0.0;
    for (size_t j = 0; j < n; ++j) {
      if (!mask.allowed(i, j)) continue;
      double e = std::exp(x.at(i, j) - mx);
      out[i * n + j] = e;
      sum += e;
    }
    for (size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dy = r.data;
    r.node = x.tape->record(r.size(), [nx, dy, m, n](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      for (size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (size_t j = 0; j < n; ++j) dot += (*dy)[i * n + j] * g[i * n + j];
        for (size_t j = 0; j < n; ++j) gx[i * n + j] += (*dy)[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return r;
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank2(x, "log_softmax");
  check_finite(x, "log_softmax");
  size_t m = x.rows(), n = x.cols();
  std::vector<double> out(x.size());
  for (size_t i = 0; i < m; ++i) {
    const double* xs = x.ptr() + i * n;
    double mx = xs[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, xs[j]);
    double sum = 0.0;
    for (size_t j = 0; j < n; ++j) sum += std::exp(xs[j] - mx);
    double lz = mx + std::log(sum);
    for (size_t j = 0; j < n; ++j) out[i * n + j] = xs[j] - lz;
  }
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    auto dy = r.data;
    r.node = x.tape->record(r.size(), [nx, dy, m, n](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      for (size_t i = 0; i < m; ++i) {
        double gsum = 0.0;
        for (size_t j = 0; j < n; ++j) gsum += g[i * n + j];
        for (size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp((*dy)[i * n + j]) * gsum;
      }
    });
  }
  return r;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layernorm");
  size_t n = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("layernorm: gain/bias sizes do not match last axis of " + shape_str(x.shape));
  result_tape(x, gain);
  result_tape(x, bias);
  Tape* tape = x.tape ? x.tape : (gain.tape ? gain.tape : bias.tape);
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(n);
  for (size_t i = 0; i < n; ++i) {
    const double* xs = x.ptr() + i * c;
    double mean = 0.0;
    for (size_t j = 0; j < c; ++j) mean += xs[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) var += (xs[j] - mean) * (xs[j] - mean);
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[i] = is;
    for (size_t j = 0; j < c; ++j) {
      double xh = (xs[j] - mean) * is;
      (*xhat)[i * c + j] = xh;
      out[i * c + j] = xh * gain.at(j) + bias.at(j);
    }
  }
  Tensor r = make_result(x.shape, std::move(out), tape);
  if (tape) {
    int nx = x.node, ng = gain.node, nb = bias.node;
    auto dg = gain.data;
    r.node = tape->record(r.size(), [nx, ng, nb, dg, xhat, inv_sigma, n, c](const std::vector<double>& g, Tape& t) {
      if (ng >= 0) {
        auto& gg = t.grad(ng);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < n; ++i) {
          double mean_gy = 0.0, mean_gy_xhat = 0.0;
          for (size_t j = 0; j < c; ++j) {
            double gy = g[i * c + j] * (*dg)[j];
            mean_gy += gy;
            mean_gy_xhat += gy * (*xhat)[i * c + j];
          }
          mean_gy /= static_cast<double>(c);
          mean_gy_xhat /= static_cast<double>(c);
          for (size_t j = 0; j < c; ++j) {
            double gy = g[i * c + j] * (*dg)[j];
            gx[i * c + j] += (*inv_sigma)[i] * (gy - mean_gy - (*xhat)[i * c + j] * mean_gy_xhat);
          }
        }
      }
    });
  }
  return r;
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                       std::vector<double>* batch_mean, std::vector<double>* batch_var) {
  require_rank2(x, "batchnorm");
  size_t n = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("batchnorm: gain/bias sizes do not match channels of " + shape_str(x.shape));
  Tape* tape = x.tape ? x.tape : (gain.tape ? gain.tape : bias.tape);
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) mean[j] += x.at(i, j);
  for (size_t j = 0; j < c; ++j) mean[j] /= static_cast<double>(n);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      double d = x.at(i, j) - mean[j];
      var[j] += d * d;
    }
  for (size_t j = 0; j < c; ++j) var[j] /= static_cast<double>(n);
  if (batch_mean) *batch_mean = mean;
  if (batch_var) *batch_var = var;

  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(c);
  for (size_t j = 0; j < c; ++j) (*inv_sigma)[j] = 1.0 / std::sqrt(var[j] + eps);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      double xh = (x.at(i, j) - mean[j]) * (*inv_sigma)[j];
      (*xhat)[i * c + j] = xh;
      out[i * c + j] = xh * gain.at(j) + bias.at(j);
    }
  Tensor r = make_result(x.shape, std::move(out), tape);
  if (tape) {
    int nx = x.node, ng = gain.node, nb = bias.node;
    auto dg = gain.data;
    r.node = tape->record(r.size(), [nx, ng, nb, dg, xhat, inv_sigma, n, c](const std::vector<double>& g, Tape& t) {
      if (ng >= 0) {
        auto& gg = t.grad(ng);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        std::vector<double> mean_gy(c, 0.0), mean_gy_xhat(c, 0.0);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) {
            double gy = g[i * c + j] * (*dg)[j];
            mean_gy[j] += gy;
            mean_gy_xhat[j] += gy * (*xhat)[i * c + j];
          }
        for (size_t j = 0; j < c; ++j) {
          mean_gy[j] /= static_cast<double>(n);
          mean_gy_xhat[j] /= static_cast<double>(n);
        }
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) {
            double gy = g[i * c + j] * (*dg)[j];
            gx[i * c + j] += (*inv_sigma)[j] * (gy - mean_gy[j] - (*xhat)[i * c + j] * mean_gy_xhat[j]);
          }
      }
    });
  }
  return r;
}

Tensor batchnorm_eval(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                      const std::vector<double>& mean, const std::vector<double>& var) {
  require_rank2(x, "batchnorm");
  size_t n = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c || mean.size() != c || var.size() != c)
    throw ShapeError("batchnorm: parameter sizes do not match channels of " + shape_str(x.shape));
  Tape* tape = x.tape ? x.tape : (gain.tape ? gain.tape : bias.tape);
  std::vector<double> inv_sigma(c);
  for (size_t j = 0; j < c; ++j) inv_sigma[j] = 1.0 / std::sqrt(var[j] + eps);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < c; ++j) {
      double xh = (x.at(i, j) - mean[j]) * inv_sigma[j];
      (*xhat)[i * c + j] = xh;
      out[i * c + j] = xh * gain.at(j) + bias.at(j);
    }
  Tensor r = make_result(x.shape, std::move(out), tape);
  if (tape) {
    int nx = x.node, ng = gain.node, nb = bias.node;
    auto dg = gain.data;
    auto is = std::make_shared<std::vector<double>>(inv_sigma);
    r.node = tape->record(r.size(), [nx, ng, nb, dg, xhat, is, n, c](const std::vector<double>& g, Tape& t) {
      if (ng >= 0) {
        auto& gg = t.grad(ng);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
      if (nx >= 0) {
        auto& gx = t.grad(nx);
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * (*dg)[j] * (*is)[j];
      }
    });
  }
  return r;
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, size_t pad_left, size_t pad_right) {
  require_rank2(x, "conv1d_depthwise");
  require_rank2(w, "conv1d_depthwise");
  size_t T = x.rows(), C = x.cols(), K = w.rows();
  if (w.cols() != C)
    throw ShapeError("conv1d_depthwise: kernel " + shape_str(w.shape) + " does not match channels of " +
                     shape_str(x.shape));
  if (K > T + pad_left + pad_right)
    throw ShapeError("conv1d_depthwise: kernel width " + std::to_string(K) + " exceeds padded input length " +
                     std::to_string(T + pad_left + pad_right));
  Tape* tape = result_tape(x, w);
  std::vector<double> out(T * C, 0.0);
  for (size_t t = 0; t < T; ++t)
    for (size_t k = 0; k < K; ++k) {
      long s = static_cast<long>(t) + static_cast<long>(k) - static_cast<long>(pad_left);
      if (s < 0 || s >= static_cast<long>(T)) continue;
      for (size_t c = 0; c < C; ++c) out[t * C + c] += x.at(static_cast<size_t>(s), c) * w.at(k, c);
    }
  Tensor r = make_result({T, C}, std::move(out), tape);
  if (tape) {
    int nx = x.node, nw = w.node;
    auto dx = x.data, dw = w.data;
    r.node = tape->record(r.size(), [nx, nw, dx, dw, T, C, K, pad_left](const std::vector<double>& g, Tape& t) {
      for (size_t tt = 0; tt < T; ++tt)
        for (size_t k = 0; k < K; ++k) {
          long s = static_cast<long>(tt) + static_cast<long>(k) - static_cast<long>(pad_left);
          if (s < 0 || s >= static_cast<long>(T)) continue;
          for (size_t c = 0; c < C; ++c) {
            double go = g[tt * C + c];
            if (nx >= 0) t.grad(nx)[static_cast<size_t>(s) * C + c] += go * (*dw)[k * C + c];
            if (nw >= 0) t.grad(nw)[k * C + c] += go * (*dx)[static_cast<size_t>(s) * C + c];
          }
        }
    });
  }
  return r;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, size_t stride, size_t pad) {
  if (x.shape.size() != 3) throw ShapeError("conv2d: expected [C x H x W] input, got " + shape_str(x.shape));
  if (w.shape.size() != 4) throw ShapeError("conv2d: expected [Co x Ci x kh x kw] kernel, got " + shape_str(w.shape));
  size_t ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
  size_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != ci)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape) + " does not match input channels of " +
                     shape_str(x.shape));
  if (b.size() != co) throw ShapeError("conv2d: bias size does not match output channels");
  if (h + 2 * pad < kh || wd + 2 * pad < kw)
    throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape));
  size_t oh = (h + 2 * pad - kh) / stride + 1;
  size_t ow = (wd + 2 * pad - kw) / stride + 1;
  Tape* tape = x.tape ? x.tape : (w.tape ? w.tape : b.tape);

  std::vector<double> out(co * oh * ow, 0.0);
  for (size_t o = 0; o < co; ++o)
    for (size_t i = 0; i < oh; ++i)
      for (size_t j = 0; j < ow; ++j) {
        double s = b.at(o);
        for (size_t c = 0; c < ci; ++c)
          for (size_t u = 0; u < kh; ++u)
            for (size_t v = 0; v < kw; ++v) {
              long yi = static_cast<long>(i * stride + u) - static_cast<long>(pad);
              long xj = static_cast<long>(j * stride + v) - static_cast<long>(pad);
              if (yi < 0 || yi >= static_cast<long>(h) || xj < 0 || xj >= static_cast<long>(wd)) continue;
              s += x.at(c * h * wd + static_cast<size_t>(yi) * wd + static_cast<size_t>(xj)) *
                   w.at(((o * ci + c) * kh + u) * kw + v);
            }
        out[(o * oh + i) * ow + j] = s;
      }
  Tensor r = make_result({co, oh, ow}, std::move(out), tape);
  if (tape) {
    int nx = x.node, nw = w.node, nb = b.node;
    auto dx = x.data, dw = w.data;
    r.node = tape->record(
        r.size(), [nx, nw, nb, dx, dw, ci, h, wd, co, kh, kw, oh, ow, stride, pad](const std::vector<double>& g, Tape& t) {
          for (size_t o = 0; o < co; ++o)
            for (size_t i = 0; i < oh; ++i)
              for (size_t j = 0; j < ow; ++j) {
                double go = g[(o * oh + i) * ow + j];
                if (go == 0.0) continue;
                if (nb >= 0) t.grad(nb)[o] += go;
                for (size_t c = 0; c < ci; ++c)
                  for (size_t u = 0; u < kh; ++u)
                    for (size_t v = 0; v < kw; ++v) {
                      long yi = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                      long xj = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                      if (yi < 0 || yi >= static_cast<long>(h) || xj < 0 || xj >= static_cast<long>(wd)) continue;
                      size_t xi = c * h * wd + static_cast<size_t>(yi) * wd + static_cast<size_t>(xj);
                      size_t wi = ((o * ci + c) * kh + u) * kw + v;
                      if (nx >= 0) t.grad(nx)[xi] += go * (*dw)[wi];
                      if (nw >= 0) t.grad(nw)[wi] += go * (*dx)[xi];
                    }
              }
        });
  }
  return r;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "gather_rows");
  size_t v = table.rows(), e = table.cols();
  for (int id : ids)
    if (id < 0 || static_cast<size_t>(id) >= v)
      throw ValueError("gather_rows: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
  std::vector<double> out(ids.size() * e);
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t j = 0; j < e; ++j) out[i * e + j] = table.at(static_cast<size_t>(ids[i]), j);
  Tensor r = make_result({ids.size(), e}, std::move(out), table.tape);
  if (table.tape) {
    int nt = table.node;
    auto idc = ids;
    r.node = table.tape->record(r.size(), [nt, idc, e](const std::vector<double>& g, Tape& t) {
      if (nt < 0) return;
      auto& gt = t.grad(nt);
      for (size_t i = 0; i < idc.size(); ++i)
        for (size_t j = 0; j < e; ++j) gt[static_cast<size_t>(idc[i]) * e + j] += g[i * e + j];
    });
  }
  return r;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  size_t c = parts[0].cols(), total = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != c)
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts[0].shape) + " vs " + shape_str(p.shape));
    total += p.rows();
    if (p.tape) {
      if (tape && tape != p.tape) throw ValueError("concat_rows: operands on different tapes");
      tape = p.tape;
    }
  }
  std::vector<double> out(total * c);
  size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.ptr(), p.ptr() + p.size(), out.begin() + static_cast<long>(off));
    off += p.size();
  }
  Tensor r = make_result({total, c}, std::move(out), tape);
  if (tape) {
    std::vector<std::pair<int, size_t>> spans;  // (node, numel)
    for (const auto& p : parts) spans.emplace_back(p.node, p.size());
    r.node = tape->record(r.size(), [spans](const std::vector<double>& g, Tape& t) {
      size_t off = 0;
      for (auto [node, numel] : spans) {
        if (node >= 0) {
          auto& gp = t.grad(node);
          for (size_t i = 0; i < numel; ++i) gp[i] += g[off + i];
        }
        off += numel;
      }
    });
  }
  return r;
}

Tensor slice_rows(const Tensor& x, size_t r0, size_t r1) {
  require_rank2(x, "slice_rows");
  if (r0 > r1 || r1 > x.rows()) throw ShapeError("slice_rows: bad range on " + shape_str(x.shape));
  size_t c = x.cols(), n = r1 - r0;
  std::vector<double> out(n * c);
  std::copy(x.ptr() + r0 * c, x.ptr() + r1 * c, out.begin());
  Tensor r = make_result({n, c}, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    r.node = x.tape->record(r.size(), [nx, r0, c, n](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      for (size_t i = 0; i < n * c; ++i) gx[r0 * c + i] += g[i];
    });
  }
  return r;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  size_t n = parts[0].rows(), total = 0;
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != n)
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts[0].shape) + " vs " + shape_str(p.shape));
    total += p.cols();
    if (p.tape) {
      if (tape && tape != p.tape) throw ValueError("concat_cols: operands on different tapes");
      tape = p.tape;
    }
  }
  std::vector<double> out(n * total);
  size_t off = 0;
  for (const auto& p : parts) {
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < p.cols(); ++j) out[i * total + off + j] = p.at(i, j);
    off += p.cols();
  }
  Tensor r = make_result({n, total}, std::move(out), tape);
  if (tape) {
    std::vector<std::pair<int, size_t>> spans;
    for (const auto& p : parts) spans.emplace_back(p.node, p.cols());
    r.node = tape->record(r.size(), [spans, n, total](const std::vector<double>& g, Tape& t) {
      size_t off = 0;
      for (auto [node, w] : spans) {
        if (node >= 0) {
          auto& gp = t.grad(node);
          for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return r;
}

Tensor slice_cols(const Tensor& x, size_t c0, size_t c1) {
  require_rank2(x, "slice_cols");
  if (c0 > c1 || c1 > x.cols()) throw ShapeError("slice_cols: bad range on " + shape_str(x.shape));
  size_t n = x.rows(), c = x.cols(), w = c1 - c0;
  std::vector<double> out(n * w);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < w; ++j) out[i * w + j] = x.at(i, c0 + j);
  Tensor r = make_result({n, w}, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    r.node = x.tape->record(r.size(), [nx, c0, c, w, n](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < w; ++j) gx[i * c + c0 + j] += g[i * w + j];
    });
  }
  return r;
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape) + " to " + shape_str(s) + " changes element count");
  std::vector<double> out(*x.data);
  Tensor r = make_result(std::move(s), std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    r.node = x.tape->record(r.size(), [nx](const std::vector<double>& g, Tape& t) {
      if (nx >= 0) axpy_into(t.grad(nx), g);
    });
  }
  return r;
}

Tensor outer_pair_add(const Tensor& a, const Tensor& b) {
  require_rank2(a, "outer_pair_add");
  require_rank2(b, "outer_pair_add");
  if (a.cols() != b.cols())
    throw ShapeError("outer_pair_add: column mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tape* tape = result_tape(a, b);
  size_t T = a.rows(), U = b.rows(), J = a.cols();
  std::vector<double> out(T * U * J);
  for (size_t t = 0; t < T; ++t)
    for (size_t u = 0; u < U; ++u)
      for (size_t j = 0; j < J; ++j) out[(t * U + u) * J + j] = a.at(t, j) + b.at(u, j);
  Tensor r = make_result({T * U, J}, std::move(out), tape);
  if (tape) {
    int na = a.node, nb = b.node;
    r.node = tape->record(r.size(), [na, nb, T, U, J](const std::vector<double>& g, Tape& t) {
      if (na >= 0) {
        auto& ga = t.grad(na);
        for (size_t tt = 0; tt < T; ++tt)
          for (size_t u = 0; u < U; ++u)
            for (size_t j = 0; j < J; ++j) ga[tt * J + j] += g[(tt * U + u) * J + j];
      }
      if (nb >= 0) {
        auto& gb = t.grad(nb);
        for (size_t tt = 0; tt < T; ++tt)
          for (size_t u = 0; u < U; ++u)
            for (size_t j = 0; j < J; ++j) gb[u * J + j] += g[(tt * U + u) * J + j];
      }
    });
  }
  return r;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (size_t i = 0; i < x.size(); ++i) s += x.at(i);
  Tensor r = make_result({1}, {s}, x.tape);
  if (x.tape) {
    int nx = x.node;
    size_t n = x.size();
    r.node = x.tape->record(1, [nx, n](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      for (size_t i = 0; i < n; ++i) gx[i] += g[0];
    });
  }
  return r;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ValueError("dropout: rate must be < 1");
  double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] = x.at(i) * m;
  }
  Tensor r = make_result(x.shape, std::move(out), x.tape);
  if (x.tape) {
    int nx = x.node;
    r.node = x.tape->record(r.size(), [nx, mask](const std::vector<double>& g, Tape& t) {
      if (nx < 0) return;
      auto& gx = t.grad(nx);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
  }
  return r;
}

}  // namespace cct
