#include "volagg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "volagg/error.hpp"

namespace volagg::ad {

namespace {

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  fail(ErrorKind::DimensionMismatch, std::string(op) + ": " + detail);
}

void check_suffix(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) shape_error(op, "undefined operand");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) shape_error(op, "shapes " + shape_str(sa) + " and " + shape_str(sb) + " are not broadcastable");
}

// Output positions o in [lo, hi) whose input index o*stride + k - pad lies in [0, n).
std::pair<long, long> valid_range(long k, long pad, long stride, long n, long n_out) {
  long lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  long hi = (n - 1 + pad - k);
  hi = hi < 0 ? 0 : hi / stride + 1;
  return {lo, std::min(hi, n_out)};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_suffix("add", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t nb = bd.size();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i % nb];
  bool rec = should_record({&a, &b});
  Tensor y = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    record("add", {&y}, [a, b, y]() {
      auto g = upstream(y.impl());
      if (double* ga = grad_target(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (double* gb = grad_target(b)) {
        const std::size_t nb = b.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_suffix("sub", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t nb = bd.size();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i % nb];
  bool rec = should_record({&a, &b});
  Tensor y = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    record("sub", {&y}, [a, b, y]() {
      auto g = upstream(y.impl());
      if (double* ga = grad_target(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (double* gb = grad_target(b)) {
        const std::size_t nb = b.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_suffix("mul", a, b);
  const auto ad = a.data();
  const auto bd = b.data();
  const std::size_t nb = bd.size();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i % nb];
  bool rec = should_record({&a, &b});
  Tensor y = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    record("mul", {&y}, [a, b, y]() {
      auto g = upstream(y.impl());
      const auto ad = a.data();
      const auto bd = b.data();
      const std::size_t nb = bd.size();
      if (double* ga = grad_target(a)) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i % nb];
      }
      if (double* gb = grad_target(b)) {
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * ad[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double factor) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  bool rec = should_record({&a});
  Tensor y = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    record("scale", {&y}, [a, y, factor]() {
      auto g = upstream(y.impl());
      double* ga = grad_target(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
    }
  }
  bool rec = should_record({&a, &b});
  Tensor y = make_result({m, n}, std::move(out), rec);
  if (rec) {
    record("matmul", {&y}, [a, b, y, m, k, n]() {
      auto g = upstream(y.impl());
      const auto ad = a.data();
      const auto bd = b.data();
      if (double* ga = grad_target(a)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bd[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (double* gb = grad_target(b)) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
          }
      }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2) shape_error("linear", "weight must be rank 2, got " + shape_str(weight.shape()));
  const std::size_t out_dim = weight.dim(0), in_dim = weight.dim(1);
  if (x.rank() < 1 || x.rank() > 2 || x.shape().back() != in_dim) {
    shape_error("linear", "input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    shape_error("linear", "bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const std::size_t rows = x.rank() == 2 ? x.dim(0) : 1;
  const auto xd = x.data();
  const auto wd = weight.data();
  std::vector<double> out(rows * out_dim);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = bias.defined() ? bias.data()[o] : 0.0;
      const double* wrow = wd.data() + o * in_dim;
      const double* xrow = xd.data() + r * in_dim;
      for (std::size_t i = 0; i < in_dim; ++i) acc += wrow[i] * xrow[i];
      out[r * out_dim + o] = acc;
    }
  }
  Shape shape = x.rank() == 2 ? Shape{rows, out_dim} : Shape{out_dim};
  bool rec = should_record({&x, &weight, &bias});
  Tensor y = make_result(std::move(shape), std::move(out), rec);
  if (rec) {
    record("linear", {&y}, [x, weight, bias, y, rows, out_dim, in_dim]() {
      auto g = upstream(y.impl());
      const auto xd = x.data();
      const auto wd = weight.data();
      double* gx = grad_target(x);
      double* gw = grad_target(weight);
      double* gb = bias.defined() ? grad_target(bias) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double go = g[r * out_dim + o];
          if (go == 0.0) continue;
          if (gb) gb[o] += go;
          if (gw) {
            for (std::size_t i = 0; i < in_dim; ++i) gw[o * in_dim + i] += go * xd[r * in_dim + i];
          }
          if (gx) {
            for (std::size_t i = 0; i < in_dim; ++i) gx[r * in_dim + i] += go * wd[o * in_dim + i];
          }
        }
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    shape_error("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  bool rec = should_record({&a});
  Tensor y = make_result(std::move(shape), std::move(out), rec);
  if (rec) {
    record("reshape", {&y}, [a, y]() {
      auto g = upstream(y.impl());
      double* ga = grad_target(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return y;
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.size()}); }

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_error("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  std::size_t outer = 1, inner = 1, total_axis = 0;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  for (auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) shape_error("concat", "shape " + shape_str(s) + " incompatible with " + shape_str(first));
    total_axis += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  std::vector<double> out(numel(out_shape));
  const std::size_t out_chunk = total_axis * inner;
  std::size_t offset = 0;
  for (auto& p : parts) {
    const std::size_t chunk = p.shape()[axis] * inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.begin() + o * chunk, chunk, out.begin() + o * out_chunk + offset);
    }
    offset += chunk;
  }
  bool rec = should_record(parts);
  Tensor y = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record("concat", {&y}, [inputs, y, axis, outer, inner, out_chunk]() {
      auto g = upstream(y.impl());
      std::size_t offset = 0;
      for (auto& p : inputs) {
        const std::size_t chunk = p.shape()[axis] * inner;
        if (double* gp = grad_target(p)) {
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[o * out_chunk + offset + i];
        }
        offset += chunk;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    shape_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t in_chunk = s[axis] * inner, out_chunk = length * inner, skip = start * inner;
  std::vector<double> out(outer * out_chunk);
  const auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(ad.begin() + o * in_chunk + skip, out_chunk, out.begin() + o * out_chunk);
  }
  bool rec = should_record({&a});
  Tensor y = make_result(std::move(out_shape), std::move(out), rec);
  if (rec) {
    record("slice", {&y}, [a, y, outer, in_chunk, out_chunk, skip]() {
      auto g = upstream(y.impl());
      double* ga = grad_target(a);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < out_chunk; ++i) ga[o * in_chunk + skip + i] += g[o * out_chunk + i];
    });
  }
  return y;
}

Tensor relu(const Tensor& a) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  const bool noting = branch::recording();
  for (std::size_t i = 0; i < ad.size(); ++i) {
    // NaN passes through so corrupted inputs surface downstream.
    out[i] = (ad[i] > 0.0 || std::isnan(ad[i])) ? ad[i] : 0.0;
    if (noting) branch::note(ad[i] > 0.0 ? 1 : 0);
  }
  bool rec = should_record({&a});
  Tensor y = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    record("relu", {&y}, [a, y]() {
      auto g = upstream(y.impl());
      const auto ad = a.data();
      double* ga = grad_target(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (ad[i] > 0.0) ga[i] += g[i];
      }
    });
  }
  return y;
}

Tensor square(const Tensor& a) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * ad[i];
  bool rec = should_record({&a});
  Tensor y = make_result(a.shape(), std::move(out), rec);
  if (rec) {
    record("square", {&y}, [a, y]() {
      auto g = upstream(y.impl());
      const auto ad = a.data();
      double* ga = grad_target(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * ad[i] * g[i];
    });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  bool rec = should_record({&a});
  Tensor y = make_result({}, {acc}, rec);
  if (rec) {
    record("sum", {&y}, [a, y]() {
      const double g = upstream(y.impl())[0];
      double* ga = grad_target(a);
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) shape_error("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) shape_error("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = s[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, ad[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        out[base + k * inner] = std::exp(ad[base + k * inner] - mx);
        z += out[base + k * inner];
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  bool rec = should_record({&a});
  Tensor y = make_result(s, std::move(out), rec);
  if (rec) {
    record("softmax", {&y}, [a, y, outer, inner, n]() {
      auto g = upstream(y.impl());
      const auto yd = y.data();
      double* ga = grad_target(a);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * yd[base + k * inner];
          for (std::size_t k = 0; k < n; ++k) {
            ga[base + k * inner] += yd[base + k * inner] * (g[base + k * inner] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) % 2 == 0 || stride == 0) {
    shape_error("conv2d", "input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(weight.shape()));
  }
  const long C = static_cast<long>(x.dim(0)), H = static_cast<long>(x.dim(1)), W = static_cast<long>(x.dim(2));
  const long O = static_cast<long>(weight.dim(0)), k = static_cast<long>(weight.dim(2)), pad = k / 2;
  const long s = static_cast<long>(stride);
  if (bias.defined() && (bias.rank() != 1 || static_cast<long>(bias.dim(0)) != O)) {
    shape_error("conv2d", "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(O) + " outputs");
  }
  const long Ho = (H + s - 1) / s, Wo = (W + s - 1) / s;
  const auto xd = x.data();
  const auto wd = weight.data();
  std::vector<double> out(static_cast<std::size_t>(O * Ho * Wo), 0.0);
  for (long o = 0; o < O; ++o) {
    double* yo = out.data() + o * Ho * Wo;
    if (bias.defined()) std::fill(yo, yo + Ho * Wo, bias.data()[o]);
    for (long c = 0; c < C; ++c) {
      const double* xc = xd.data() + c * H * W;
      for (long ky = 0; ky < k; ++ky) {
        auto [oy0, oy1] = valid_range(ky, pad, s, H, Ho);
        for (long kx = 0; kx < k; ++kx) {
          auto [ox0, ox1] = valid_range(kx, pad, s, W, Wo);
          const double wv = wd[((o * C + c) * k + ky) * k + kx];
          if (wv == 0.0) continue;
          for (long oy = oy0; oy < oy1; ++oy) {
            const double* xrow = xc + (oy * s + ky - pad) * W;
            double* yrow = yo + oy * Wo;
            for (long ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xrow[ox * s + kx - pad];
          }
        }
      }
    }
  }
  bool rec = should_record({&x, &weight, &bias});
  Tensor y = make_result({static_cast<std::size_t>(O), static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo)},
                         std::move(out), rec);
  if (rec) {
    record("conv2d", {&y}, [x, weight, bias, y, C, H, W, O, k, pad, s, Ho, Wo]() {
      auto g = upstream(y.impl());
      const auto xd = x.data();
      const auto wd = weight.data();
      double* gx = grad_target(x);
      double* gw = grad_target(weight);
      double* gb = bias.defined() ? grad_target(bias) : nullptr;
      for (long o = 0; o < O; ++o) {
        const double* go = g.data() + o * Ho * Wo;
        if (gb) {
          double acc = 0.0;
          for (long i = 0; i < Ho * Wo; ++i) acc += go[i];
          gb[o] += acc;
        }
        for (long c = 0; c < C; ++c) {
          const double* xc = xd.data() + c * H * W;
          double* gxc = gx ? gx + c * H * W : nullptr;
          for (long ky = 0; ky < k; ++ky) {
            auto [oy0, oy1] = valid_range(ky, pad, s, H, Ho);
            for (long kx = 0; kx < k; ++kx) {
              auto [ox0, ox1] = valid_range(kx, pad, s, W, Wo);
              const std::size_t widx = static_cast<std::size_t>(((o * C + c) * k + ky) * k + kx);
              const double wv = wd[widx];
              double acc = 0.0;
              for (long oy = oy0; oy < oy1; ++oy) {
                const long row = (oy * s + ky - pad) * W;
                const double* grow = go + oy * Wo;
                for (long ox = ox0; ox < ox1; ++ox) {
                  const long xi = row + ox * s + kx - pad;
                  acc += grow[ox] * xc[xi];
                  if (gxc) gxc[xi] += grow[ox] * wv;
                }
              }
              if (gw) gw[widx] += acc;
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4 || weight.rank() != 5 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) != weight.dim(4) || weight.dim(2) % 2 == 0) {
    shape_error("conv3d", "input " + shape_str(x.shape()) + " incompatible with kernel " + shape_str(weight.shape()));
  }
  const long C = static_cast<long>(x.dim(0)), D = static_cast<long>(x.dim(1)), H = static_cast<long>(x.dim(2)),
             W = static_cast<long>(x.dim(3));
  const long O = static_cast<long>(weight.dim(0)), k = static_cast<long>(weight.dim(2)), pad = k / 2;
  if (bias.defined() && (bias.rank() != 1 || static_cast<long>(bias.dim(0)) != O)) {
    shape_error("conv3d", "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(O) + " outputs");
  }
  const long vol = D * H * W;
  const auto xd = x.data();
  const auto wd = weight.data();
  std::vector<double> out(static_cast<std::size_t>(O * vol), 0.0);
  for (long o = 0; o < O; ++o) {
    double* yo = out.data() + o * vol;
    if (bias.defined()) std::fill(yo, yo + vol, bias.data()[o]);
    for (long c = 0; c < C; ++c) {
      const double* xc = xd.data() + c * vol;
      for (long kz = 0; kz < k; ++kz) {
        auto [z0, z1] = valid_range(kz, pad, 1, D, D);
        for (long ky = 0; ky < k; ++ky) {
          auto [y0, y1] = valid_range(ky, pad, 1, H, H);
          for (long kx = 0; kx < k; ++kx) {
            auto [x0, x1] = valid_range(kx, pad, 1, W, W);
            const double wv = wd[(((o * C + c) * k + kz) * k + ky) * k + kx];
            if (wv == 0.0) continue;
            for (long z = z0; z < z1; ++z) {
              for (long yy = y0; yy < y1; ++yy) {
                const long xoff = ((z + kz - pad) * H + (yy + ky - pad)) * W + (kx - pad);
                double* yrow = yo + (z * H + yy) * W;
                for (long xx = x0; xx < x1; ++xx) yrow[xx] += wv * xc[xoff + xx];
              }
            }
          }
        }
      }
    }
  }
  bool rec = should_record({&x, &weight, &bias});
  Tensor y = make_result(Shape{static_cast<std::size_t>(O), x.dim(1), x.dim(2), x.dim(3)}, std::move(out), rec);
  if (rec) {
    record("conv3d", {&y}, [x, weight, bias, y, C, D, H, W, O, k, pad, vol]() {
      auto g = upstream(y.impl());
      const auto xd = x.data();
      const auto wd = weight.data();
      double* gx = grad_target(x);
      double* gw = grad_target(weight);
      double* gb = bias.defined() ? grad_target(bias) : nullptr;
      for (long o = 0; o < O; ++o) {
        const double* go = g.data() + o * vol;
        if (gb) {
          double acc = 0.0;
          for (long i = 0; i < vol; ++i) acc += go[i];
          gb[o] += acc;
        }
        for (long c = 0; c < C; ++c) {
          const double* xc = xd.data() + c * vol;
          double* gxc = gx ? gx + c * vol : nullptr;
          for (long kz = 0; kz < k; ++kz) {
            auto [z0, z1] = valid_range(kz, pad, 1, D, D);
            for (long ky = 0; ky < k; ++ky) {
              auto [y0, y1] = valid_range(ky, pad, 1, H, H);
              for (long kx = 0; kx < k; ++kx) {
                auto [x0, x1] = valid_range(kx, pad, 1, W, W);
                const std::size_t widx = static_cast<std::size_t>((((o * C + c) * k + kz) * k + ky) * k + kx);
                const double wv = wd[widx];
                double acc = 0.0;
                for (long z = z0; z < z1; ++z) {
                  for (long yy = y0; yy < y1; ++yy) {
                    const long xoff = ((z + kz - pad) * H + (yy + ky - pad)) * W + (kx - pad);
                    const double* grow = go + (z * H + yy) * W;
                    for (long xx = x0; xx < x1; ++xx) {
                      acc += grow[xx] * xc[xoff + xx];
                      if (gxc) gxc[xoff + xx] += grow[xx] * wv;
                    }
                  }
                }
                if (gw) gw[widx] += acc;
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor avg_pool3d(const Tensor& x, std::size_t window) {
  if (x.rank() != 4 || window == 0 || x.dim(1) % window || x.dim(2) % window || x.dim(3) % window) {
    shape_error("avg_pool3d", "input " + shape_str(x.shape()) + " not divisible by window " + std::to_string(window));
  }
  const std::size_t C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3), w = window;
  const std::size_t Do = D / w, Ho = H / w, Wo = W / w;
  const double inv = 1.0 / static_cast<double>(w * w * w);
  const auto xd = x.data();
  std::vector<double> out(C * Do * Ho * Wo, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t yy = 0; yy < H; ++yy)
        for (std::size_t xx = 0; xx < W; ++xx) {
          out[((c * Do + z / w) * Ho + yy / w) * Wo + xx / w] += xd[((c * D + z) * H + yy) * W + xx] * inv;
        }
  bool rec = should_record({&x});
  Tensor y = make_result({C, Do, Ho, Wo}, std::move(out), rec);
  if (rec) {
    record("avg_pool3d", {&y}, [x, y, C, D, H, W, w, Do, Ho, Wo, inv]() {
      auto g = upstream(y.impl());
      double* gx = grad_target(x);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < D; ++z)
          for (std::size_t yy = 0; yy < H; ++yy)
            for (std::size_t xx = 0; xx < W; ++xx) {
              gx[((c * D + z) * H + yy) * W + xx] += g[((c * Do + z / w) * Ho + yy / w) * Wo + xx / w] * inv;
            }
    });
  }
  return y;
}

Tensor group_norm(const Tensor& x, std::size_t groups, double eps) {
  if (x.rank() < 1 || groups == 0 || x.dim(0) % groups != 0) {
    shape_error("group_norm", "cannot split " + shape_str(x.shape()) + " into " + std::to_string(groups) + " groups");
  }
  const std::size_t n = x.size() / groups;
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<double> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const double* xg = xd.data() + g * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xg[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xg[i] - mu) * (xg[i] - mu);
    var /= static_cast<double>(n);
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) out[g * n + i] = (xg[i] - mu) * inv_std[g];
  }
  bool rec = should_record({&x});
  Tensor y = make_result(x.shape(), std::move(out), rec);
  if (rec) {
    record("group_norm", {&y}, [x, y, groups, n, inv_std]() {
      auto g = upstream(y.impl());
      const auto yd = y.data();
      double* gx = grad_target(x);
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = gi * n;
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          mean_g += g[base + i];
          mean_gy += g[base + i] * yd[base + i];
        }
        mean_g /= static_cast<double>(n);
        mean_gy /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          gx[base + i] += inv_std[gi] * (g[base + i] - mean_g - yd[base + i] * mean_gy);
        }
      }
    });
  }
  return y;
}

}  // namespace volagg::ad
