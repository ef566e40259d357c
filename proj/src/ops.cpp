#include "mxacl/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace mxacl::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat as_mat(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
          "matmul: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor out({n, m});
  as_mat(out, n, m).noalias() = as_mat(av, n, k) * as_mat(bv, k, m);
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib, n, k, m](Tape& t, const Tensor& g) {
        auto G = as_mat(g, n, m);
        if (Tensor* ga = t.grad_buffer(ia)) {
          as_mat(*ga, n, k).noalias() += G * as_mat(t.value(ib), k, m).transpose();
        }
        if (Tensor* gb = t.grad_buffer(ib)) {
          as_mat(*gb, k, m).noalias() += as_mat(t.value(ia), n, k).transpose() * G;
        }
      },
      "matmul");
}

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
      },
      "add");
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib](Tape& t, const Tensor& g) {
        t.accumulate(ia, g);
        if (Tensor* gb = t.grad_buffer(ib)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
      },
      "sub");
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ia = a.id(), ib = b.id();
  return a.tape().record(
      std::move(out), {a, b},
      [ia, ib](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_buffer(ia)) {
          const Tensor& bv = t.value(ib);
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
        }
        if (Tensor* gb = t.grad_buffer(ib)) {
          const Tensor& av = t.value(ia);
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
        }
      },
      "mul");
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  const int ia = a.id();
  return a.tape().record(
      std::move(out), {a},
      [ia, c](Tape& t, const Tensor& g) {
        if (Tensor* ga = t.grad_buffer(ia)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * c;
        }
      },
      "scale");
}

Var add_row(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require(xv.rank() >= 1 && bv.rank() == 1 && bv.dim(0) == xv.cols(),
          "add_row: bias " + shape_str(bv.shape()) + " does not match " + shape_str(xv.shape()));
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  const int ix = x.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, bias},
      [ix, ib, rows, cols](Tape& t, const Tensor& g) {
        t.accumulate(ix, g);
        if (Tensor* gb = t.grad_buffer(ib)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
        }
      },
      "add_row");
}

Var tanh(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
  const int ix = x.id();
  return x.tape().record(
      out, {x},
      [ix, y = out](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (1.0 - y[i] * y[i]);
        }
      },
      "tanh");
}

Var gelu(Var x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        const Tensor& xv = t.value(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double v = xv[i];
          const double th = std::tanh(kC * (v + kA * v * v * v));
          const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
          (*gx)[i] += g[i] * d;
        }
      },
      "gelu");
}

Var exp(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
  const int ix = x.id();
  return x.tape().record(
      out, {x},
      [ix, y = out](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i];
        }
      },
      "exp");
}

Var log(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::log(xv[i]);
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          const Tensor& xv = t.value(ix);
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] / xv[i];
        }
      },
      "log");
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &xv.data()[r * cols];
    double* o = &out.data()[r * cols];
    const double mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= s;
  }
  const int ix = x.id();
  return x.tape().record(
      out, {x},
      [ix, rows, cols, y = out](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) (*gx)[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
      },
      "softmax");
}

Var log_softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &xv.data()[r * cols];
    const double mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(in[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  const int ix = x.id();
  return x.tape().record(
      out, {x},
      [ix, rows, cols, y = out](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            (*gx)[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gs;
        }
      },
      "log_softmax");
}

Var masked_log_softmax(Var x, std::span<const std::uint8_t> include) {
  const Tensor& xv = x.value();
  require(include.size() == xv.size(), "masked_log_softmax: mask size mismatch");
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out(xv.shape(), 0.0);
  Tensor prob(xv.shape(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c)
      if (include[r * cols + c]) mx = std::max(mx, xv[r * cols + c]);
    if (mx == -INFINITY) continue;  // empty row: all outputs stay 0
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (include[r * cols + c]) s += std::exp(xv[r * cols + c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) {
      if (!include[r * cols + c]) continue;
      out[r * cols + c] = xv[r * cols + c] - lse;
      prob[r * cols + c] = std::exp(out[r * cols + c]);
    }
  }
  const int ix = x.id();
  std::vector<std::uint8_t> mask(include.begin(), include.end());
  return x.tape().record(
      std::move(out), {x},
      [ix, rows, cols, prob = std::move(prob), mask = std::move(mask)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < cols; ++c)
            if (mask[r * cols + c]) gs += g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            if (mask[r * cols + c]) (*gx)[r * cols + c] += g[r * cols + c] - prob[r * cols + c] * gs;
        }
      },
      "masked_log_softmax");
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const int ix = x.id();
  return x.tape().record(
      Tensor::scalar(s), {x},
      [ix](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          for (double& v : gx->data()) v += g[0];
        }
      },
      "sum");
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  require(n > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const int ix = x.id();
  return x.tape().record(
      Tensor::scalar(s / static_cast<double>(n)), {x},
      [ix, n](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          const double d = g[0] / static_cast<double>(n);
          for (double& v : gx->data()) v += d;
        }
      },
      "mean");
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  require(axis < s0.size(), "concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == s0.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(i == axis || s[i] == s0[i], "concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    }
    widths.push_back(s[axis]);
    total += s[axis];
  }
  Shape os = s0;
  os[axis] = total;
  Tensor out(os);
  std::size_t off = 0;
  std::vector<int> ids;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    const std::size_t blk = widths[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(&v.data()[o * blk], blk, &out.data()[o * total * inner + off * inner]);
    }
    off += widths[p];
    ids.push_back(parts[p].id());
  }
  return parts[0].tape().record(
      std::move(out), parts,
      [ids, widths, outer, inner, total](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const std::size_t blk = widths[p] * inner;
          if (Tensor* gp = t.grad_buffer(ids[p])) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < blk; ++i) (*gp)[o * blk + i] += g[o * total * inner + off * inner + i];
          }
          off += widths[p];
        }
      },
      "concat");
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  require(axis < s.size() && begin <= end && end <= s[axis], "slice: range out of bounds for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t width = end - begin, full = s[axis];
  Shape os = s;
  os[axis] = width;
  Tensor out(os);
  const Tensor& v = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(&v.data()[(o * full + begin) * inner], width * inner, &out.data()[o * width * inner]);
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix, outer, inner, width, full, begin](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < width * inner; ++i) (*gx)[(o * full + begin) * inner + i] += g[o * width * inner + i];
      },
      "slice");
}

Var transpose(Var x) {
  const Tensor& v = x.value();
  require(v.rank() == 2, "transpose: expects 2-D, got " + shape_str(v.shape()));
  const std::size_t r = v.dim(0), c = v.dim(1);
  Tensor out({c, r});
  as_mat(out, c, r) = as_mat(v, r, c).transpose();
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix, r, c](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) as_mat(*gx, r, c) += as_mat(g, c, r).transpose();
      },
      "transpose");
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        }
      },
      "reshape");
}

Var select_rows(Var x, std::span<const std::size_t> idx) {
  const Tensor& v = x.value();
  const std::size_t rows = v.rows(), cols = v.cols();
  Tensor out({idx.size(), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < rows, "select_rows: row index out of range");
    std::copy_n(&v.data()[idx[i] * cols], cols, &out.data()[i * cols]);
  }
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix, cols, rows_idx = std::vector<std::size_t>(idx.begin(), idx.end())](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t i = 0; i < rows_idx.size(); ++i)
          for (std::size_t c = 0; c < cols; ++c) (*gx)[rows_idx[i] * cols + c] += g[i * cols + c];
      },
      "select_rows");
}

Var pick(Var x, std::span<const std::size_t> idx) {
  const Tensor& v = x.value();
  require(v.rank() == 2 && idx.size() == v.dim(0), "pick: expects 2-D input with one index per row");
  const std::size_t cols = v.dim(1);
  Tensor out({idx.size()});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < cols, "pick: column index out of range");
    out[r] = v[r * cols + idx[r]];
  }
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix, cols, cols_idx = std::vector<std::size_t>(idx.begin(), idx.end())](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t r = 0; r < cols_idx.size(); ++r) (*gx)[r * cols + cols_idx[r]] += g[r];
      },
      "pick");
}

Var l2_normalize(Var x) {
  const Tensor& v = x.value();
  const std::size_t rows = v.rows(), cols = v.cols();
  Tensor out(v.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c] * v[r * cols + c];
    const double n = std::sqrt(s);
    if (!(n >= 1e-12)) throw NumericError("l2_normalize: row " + std::to_string(r) + " has norm < 1e-12");
    norms[r] = n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = v[r * cols + c] / n;
  }
  const int ix = x.id();
  return x.tape().record(
      out, {x},
      [ix, rows, cols, y = out, norms = std::move(norms)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_buffer(ix);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c)
            (*gx)[r * cols + c] += (g[r * cols + c] - y[r * cols + c] * dot) / norms[r];
        }
      },
      "l2_normalize");
}

Var dropout(Var x, double rate, Rng& rng, bool train) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  const Tensor& v = x.value();
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor mask(v.shape());
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    out[i] = v[i] * mask[i];
  }
  const int ix = x.id();
  return x.tape().record(
      std::move(out), {x},
      [ix, mask = std::move(mask)](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_buffer(ix)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask[i];
        }
      },
      "dropout");
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& v = x.value();
  const std::size_t rows = v.rows(), cols = v.cols();
  require(gain.shape() == Shape{cols} && bias.shape() == Shape{cols}, "layer_norm: gain/bias must have shape [C]");
  Tensor xhat(v.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += v[r * cols + c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = v[r * cols + c] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) xhat[r * cols + c] = (v[r * cols + c] - mu) * inv_std[r];
  }
  Tensor out(v.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xhat[r * cols + c] * gv[c] + bv[c];
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias},
      [ix, ig, ib, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(ig);
        if (Tensor* gx = t.grad_buffer(ix)) {
          const double inv_c = 1.0 / static_cast<double>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[r * cols + c] * gv[c];
              m1 += dxh;
              m2 += dxh * xhat[r * cols + c];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[r * cols + c] * gv[c];
              (*gx)[r * cols + c] += inv_std[r] * (dxh - m1 - xhat[r * cols + c] * m2);
            }
          }
        }
        if (Tensor* gg = t.grad_buffer(ig)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gg)[c] += g[r * cols + c] * xhat[r * cols + c];
        }
        if (Tensor* gb = t.grad_buffer(ib)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += g[r * cols + c];
        }
      },
      "layer_norm");
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  require(tv.rank() == 2, "embedding: table must be 2-D");
  const std::size_t vocab = tv.dim(0), cols = tv.dim(1);
  Tensor out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ValidationError("embedding: id " + std::to_string(ids[i]) + " out of range for table of " +
                            std::to_string(vocab));
    }
    std::copy_n(&tv.data()[static_cast<std::size_t>(ids[i]) * cols], cols, &out.data()[i * cols]);
  }
  const int it = table.id();
  return table.tape().record(
      std::move(out), {table},
      [it, cols, idv = std::vector<std::int32_t>(ids.begin(), ids.end())](Tape& t, const Tensor& g) {
        Tensor* gt = t.grad_buffer(it);
        if (!gt) return;
        for (std::size_t i = 0; i < idv.size(); ++i)
          for (std::size_t c = 0; c < cols; ++c) (*gt)[static_cast<std::size_t>(idv[i]) * cols + c] += g[i * cols + c];
      },
      "embedding");
}

Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

Var attention(Var queries, Var keys, Var values, std::span<const std::uint8_t> key_mask, std::size_t batch,
              std::size_t query_len, std::size_t key_len, std::size_t heads) {
  const Tensor& q = queries.value();
  const Tensor& k = keys.value();
  const Tensor& v = values.value();
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: inputs must be 2-D");
  const std::size_t d = q.dim(1);
  require(heads > 0 && d % heads == 0, "attention: width not divisible by head count");
  require(q.dim(0) == batch * query_len && k.dim(0) == batch * key_len && v.dim(0) == batch * key_len &&
              k.dim(1) == d && v.dim(1) == d,
          "attention: shape mismatch");
  require(key_mask.size() == batch * key_len, "attention: key mask size mismatch");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[((b*heads + h)*query_len + i)*key_len + j]
  std::vector<double> probs(batch * heads * query_len * key_len, 0.0);
  Tensor out({batch * query_len, d}, 0.0);
  std::vector<double> row(key_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < query_len; ++i) {
        const double* qi = &q.data()[(b * query_len + i) * d + h * dh];
        double mx = -INFINITY;
        for (std::size_t j = 0; j < key_len; ++j) {
          if (!key_mask[b * key_len + j]) continue;
          const double* kj = &k.data()[(b * key_len + j) * d + h * dh];
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          row[j] = s * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        if (mx == -INFINITY) throw NumericError("attention: sequence with no unmasked keys");
        double z = 0.0;
        double* p = &probs[((b * heads + h) * query_len + i) * key_len];
        for (std::size_t j = 0; j < key_len; ++j) {
          if (!key_mask[b * key_len + j]) continue;
          z += (p[j] = std::exp(row[j] - mx));
        }
        double* o = &out.data()[(b * query_len + i) * d + h * dh];
        for (std::size_t j = 0; j < key_len; ++j) {
          if (!key_mask[b * key_len + j]) continue;
          p[j] /= z;
          const double* vj = &v.data()[(b * key_len + j) * d + h * dh];
          for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vj[c];
        }
      }
    }
  }
  const int iq = queries.id(), ik = keys.id(), iv = values.id();
  return queries.tape().record(
      std::move(out), {queries, keys, values},
      [iq, ik, iv, batch, query_len, key_len, heads, d, dh, inv_sqrt, probs = std::move(probs)](Tape& t,
                                                                                                  const Tensor& g) {
        const Tensor& q = t.value(iq);
        const Tensor& k = t.value(ik);
        const Tensor& v = t.value(iv);
        Tensor* gq = t.grad_buffer(iq);
        Tensor* gk = t.grad_buffer(ik);
        Tensor* gv = t.grad_buffer(iv);
        std::vector<double> dp(key_len);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < query_len; ++i) {
              const double* p = &probs[((b * heads + h) * query_len + i) * key_len];
              const double* go = &g.data()[(b * query_len + i) * d + h * dh];
              double pdp = 0.0;
              for (std::size_t j = 0; j < key_len; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = &v.data()[(b * key_len + j) * d + h * dh];
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
                dp[j] = s;
                pdp += p[j] * s;
                if (gv) {
                  double* gvj = &gv->data()[(b * key_len + j) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
                }
              }
              const double* qi = &q.data()[(b * query_len + i) * d + h * dh];
              for (std::size_t j = 0; j < key_len; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - pdp) * inv_sqrt;
                const double* kj = &k.data()[(b * key_len + j) * d + h * dh];
                if (gq) {
                  double* gqi = &gq->data()[(b * query_len + i) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = &gk->data()[(b * key_len + j) * d + h * dh];
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      },
      "attention");
}

}  // namespace mxacl::ops
