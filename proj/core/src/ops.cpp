#include "attncap/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <unordered_map>

namespace attncap {

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void accumulate(GradStore& store, const Tensor& t, const std::vector<double>& g) {
  if (!t.impl()->tracked) return;
  auto& dst = store.get(t.impl());
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// View of a tensor as a 2-D row-major matrix.
struct MatView {
  const double* p;
  int64_t rows, cols;
  double operator()(int64_t i, int64_t j) const { return p[i * cols + j]; }
};

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2 ||
      (a.rank() == 1 && b.rank() == 1)) {
    shape_error("matmul", "unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int64_t m = a.rank() == 2 ? a.dim(0) : 1;
  const int64_t k = a.rank() == 2 ? a.dim(1) : a.dim(0);
  const int64_t kb = b.rank() == 2 ? b.dim(0) : b.dim(0);
  const int64_t n = b.rank() == 2 ? b.dim(1) : 1;
  if (k != kb) {
    shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) out_shape = {m, n};
  else if (b.rank() == 1) out_shape = {m};
  else out_shape = {n};

  const Tensor ins[] = {a, b};
  Tensor out = tape.make_output(out_shape, ins);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  tape.record(out, [a, b, out, m, k, n](GradStore& store) {
    const auto& g = *store.find(out.impl());
    if (a.impl()->tracked) {
      auto& ga = store.get(a.impl());
      const double* pb = b.data().data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (int64_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * pb[kk * n + j];
        }
    }
    if (b.impl()->tracked) {
      auto& gb = store.get(b.impl());
      const double* pa = a.data().data();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          const double av = pa[i * k + kk];
          for (int64_t j = 0; j < n; ++j) gb[kk * n + j] += av * g[i * n + j];
        }
    }
  });
  return out;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  if (a.rank() != 2) shape_error("transpose", "expects rank 2, got " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  const Tensor ins[] = {a};
  Tensor out = tape.make_output({c, r}, ins);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) po[j * r + i] = pa[i * c + j];
  tape.record(out, [a, out, r, c](GradStore& store) {
    const auto& g = *store.find(out.impl());
    if (!a.impl()->tracked) return;
    auto& ga = store.get(a.impl());
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
  return out;
}

namespace {

Tensor binary_elementwise(Tape& tape, const char* name, const Tensor& a, const Tensor& b,
                          double (*fwd)(double, double), double da_coef, double db_coef,
                          bool mul_rule) {
  if (a.shape() != b.shape()) {
    shape_error(name, "shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor ins[] = {a, b};
  Tensor out = tape.make_output(a.shape(), ins);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  tape.record(out, [a, b, out, da_coef, db_coef, mul_rule, n](GradStore& store) {
    const auto& g = *store.find(out.impl());
    if (a.impl()->tracked) {
      auto& ga = store.get(a.impl());
      const double* pb = b.data().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (mul_rule ? pb[i] : da_coef);
    }
    if (b.impl()->tracked) {
      auto& gb = store.get(b.impl());
      const double* pa = a.data().data();
      for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * (mul_rule ? pa[i] : db_coef);
    }
  });
  return out;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(tape, "add", a, b, [](double x, double y) { return x + y; }, 1.0, 1.0, false);
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(tape, "sub", a, b, [](double x, double y) { return x - y; }, 1.0, -1.0, false);
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return binary_elementwise(tape, "mul", a, b, [](double x, double y) { return x * y; }, 0.0, 0.0, true);
}

Tensor bias_add(Tape& tape, const Tensor& a, const Tensor& v, int axis) {
  if (v.rank() != 1) shape_error("bias_add", "bias must be rank 1, got " + shape_str(v.shape()));
  if (axis == -1) axis = a.rank() - 1;
  if (axis < 0 || axis >= a.rank()) shape_error("bias_add", "axis out of range");
  if (a.rank() != 2 && axis != a.rank() - 1) {
    shape_error("bias_add", "non-trailing axis only supported for rank-2 inputs");
  }
  if (v.dim(0) != a.dim(axis)) {
    shape_error("bias_add", "bias length " + shape_str(v.shape()) + " does not match axis extent of " +
                                shape_str(a.shape()));
  }
  const Tensor ins[] = {a, v};
  Tensor out = tape.make_output(a.shape(), ins);
  const double* pa = a.data().data();
  const double* pv = v.data().data();
  double* po = out.mutable_data().data();
  const int64_t n = a.numel();
  const int64_t len = v.dim(0);
  const bool rowwise = (a.rank() == 2 && axis == 0);
  const int64_t inner = rowwise ? a.dim(1) : 1;
  const int64_t trailing = rowwise ? 1 : len;  // stride pattern selector
  if (rowwise) {
    for (int64_t i = 0; i < a.dim(0); ++i)
      for (int64_t j = 0; j < inner; ++j) po[i * inner + j] = pa[i * inner + j] + pv[i];
  } else {
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pv[i % trailing];
  }
  tape.record(out, [a, v, out, rowwise, inner, len, n](GradStore& store) {
    const auto& g = *store.find(out.impl());
    if (a.impl()->tracked) {
      auto& ga = store.get(a.impl());
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (v.impl()->tracked) {
      auto& gv = store.get(v.impl());
      if (rowwise) {
        for (int64_t i = 0; i < len; ++i)
          for (int64_t j = 0; j < inner; ++j) gv[i] += g[i * inner + j];
      } else {
        for (int64_t i = 0; i < n; ++i) gv[i % len] += g[i];
      }
    }
  });
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Tape& tape, const Tensor& a, Fwd fwd, Bwd bwd) {
  const Tensor ins[] = {a};
  Tensor out = tape.make_output(a.shape(), ins);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  tape.record(out, [a, out, bwd, n](GradStore& store) {
    if (!a.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& ga = store.get(a.impl());
    const double* pa = a.data().data();
    const double* po = out.data().data();
    for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bwd(pa[i], po[i]);
  });
  return out;
}

}  // namespace

Tensor sigmoid(Tape& tape, const Tensor& a) {
  return unary_elementwise(
      tape, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& a) {
  return unary_elementwise(
      tape, a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(Tape& tape, const Tensor& a) {
  return unary_elementwise(
      tape, a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(Tape& tape, const Tensor& a) {
  return unary_elementwise(
      tape, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor relu(Tape& tape, const Tensor& a) {
  // Subgradient 0 at the tie x == 0.
  return unary_elementwise(
      tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  return unary_elementwise(
      tape, a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Tensor softmax(Tape& tape, const Tensor& a) {
  const Tensor ins[] = {a};
  Tensor out = tape.make_output(a.shape(), ins);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  const int64_t n = a.numel();
  double mx = pa[0];
  for (int64_t i = 1; i < n; ++i) mx = std::max(mx, pa[i]);
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = std::exp(pa[i] - mx);
    total += po[i];
  }
  for (int64_t i = 0; i < n; ++i) po[i] /= total;
  tape.record(out, [a, out, n](GradStore& store) {
    if (!a.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& ga = store.get(a.impl());
    const double* y = out.data().data();
    double dot = 0.0;
    for (int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
    for (int64_t i = 0; i < n; ++i) ga[i] += y[i] * (g[i] - dot);
  });
  return out;
}

Tensor sum(Tape& tape, const Tensor& a, int axis) {
  const Tensor ins[] = {a};
  if (axis == -1) {
    Tensor out = tape.make_output({1}, ins);
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.mutable_data()[0] = s;
    const int64_t n = a.numel();
    tape.record(out, [a, out, n](GradStore& store) {
      if (!a.impl()->tracked) return;
      const double g = (*store.find(out.impl()))[0];
      auto& ga = store.get(a.impl());
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    });
    return out;
  }
  if (a.rank() == 1 && axis == 0) return sum(tape, a, -1);
  if (a.rank() != 2 || (axis != 0 && axis != 1)) {
    shape_error("sum", "axis " + std::to_string(axis) + " invalid for shape " + shape_str(a.shape()));
  }
  const int64_t r = a.dim(0), c = a.dim(1);
  const int64_t out_len = axis == 0 ? c : r;
  Tensor out = tape.make_output({out_len}, ins);
  const double* pa = a.data().data();
  double* po = out.mutable_data().data();
  if (axis == 0) {
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) po[j] += pa[i * c + j];
  } else {
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) po[i] += pa[i * c + j];
  }
  tape.record(out, [a, out, r, c, axis](GradStore& store) {
    if (!a.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& ga = store.get(a.impl());
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) ga[i * c + j] += g[axis == 0 ? j : i];
  });
  return out;
}

Tensor max_rect(Tape& tape, const Tensor& map, int64_t r0, int64_t c0, int64_t r1, int64_t c1) {
  if (map.rank() != 3) shape_error("max_rect", "expects HxWxC map, got " + shape_str(map.shape()));
  const int64_t H = map.dim(0), W = map.dim(1), C = map.dim(2);
  if (r0 < 0 || c0 < 0 || r1 >= H || c1 >= W || r0 > r1 || c0 > c1) {
    shape_error("max_rect", "rectangle (" + std::to_string(r0) + "," + std::to_string(c0) + ")-(" +
                                std::to_string(r1) + "," + std::to_string(c1) + ") invalid for map " +
                                shape_str(map.shape()));
  }
  const Tensor ins[] = {map};
  Tensor out = tape.make_output({C}, ins);
  const double* pm = map.data().data();
  double* po = out.mutable_data().data();
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C));
  for (int64_t ch = 0; ch < C; ++ch) {
    double best = pm[(r0 * W + c0) * C + ch];
    int64_t best_cell = r0 * W + c0;
    for (int64_t i = r0; i <= r1; ++i)
      for (int64_t j = c0; j <= c1; ++j) {
        const double v = pm[(i * W + j) * C + ch];
        if (v > best) {
          best = v;
          best_cell = i * W + j;
        }
      }
    po[ch] = best;
    (*argmax)[static_cast<size_t>(ch)] = best_cell;
  }
  tape.record(out, [map, out, argmax, C](GradStore& store) {
    if (!map.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& gm = store.get(map.impl());
    for (int64_t ch = 0; ch < C; ++ch) gm[(*argmax)[static_cast<size_t>(ch)] * C + ch] += g[ch];
  });
  return out;
}

Tensor concat(Tape& tape, std::span<const Tensor> vectors) {
  if (vectors.empty()) shape_error("concat", "needs at least one input");
  int64_t total = 0;
  for (const Tensor& t : vectors) {
    if (t.rank() != 1) shape_error("concat", "expects rank-1 inputs, got " + shape_str(t.shape()));
    total += t.dim(0);
  }
  Tensor out = tape.make_output({total}, vectors);
  double* po = out.mutable_data().data();
  int64_t off = 0;
  for (const Tensor& t : vectors) {
    std::copy(t.data().begin(), t.data().end(), po + off);
    off += t.dim(0);
  }
  std::vector<Tensor> saved(vectors.begin(), vectors.end());
  tape.record(out, [saved, out](GradStore& store) {
    const auto& g = *store.find(out.impl());
    int64_t off = 0;
    for (const Tensor& t : saved) {
      if (t.impl()->tracked) {
        auto& gt = store.get(t.impl());
        for (int64_t i = 0; i < t.dim(0); ++i) gt[i] += g[off + i];
      }
      off += t.dim(0);
    }
  });
  return out;
}

Tensor stack_rows(Tape& tape, std::span<const Tensor> rows) {
  if (rows.empty()) shape_error("stack_rows", "needs at least one row");
  const int64_t d = rows[0].rank() == 1 ? rows[0].dim(0) : -1;
  for (const Tensor& t : rows) {
    if (t.rank() != 1 || t.dim(0) != d) {
      shape_error("stack_rows", "rows must share a rank-1 shape, got " + shape_str(t.shape()));
    }
  }
  const int64_t k = static_cast<int64_t>(rows.size());
  Tensor out = tape.make_output({k, d}, rows);
  double* po = out.mutable_data().data();
  for (int64_t i = 0; i < k; ++i) {
    std::copy(rows[i].data().begin(), rows[i].data().end(), po + i * d);
  }
  std::vector<Tensor> saved(rows.begin(), rows.end());
  tape.record(out, [saved, out, d](GradStore& store) {
    const auto& g = *store.find(out.impl());
    for (size_t i = 0; i < saved.size(); ++i) {
      if (!saved[i].impl()->tracked) continue;
      auto& gt = store.get(saved[i].impl());
      for (int64_t j = 0; j < d; ++j) gt[j] += g[static_cast<int64_t>(i) * d + j];
    }
  });
  return out;
}

Tensor row(Tape& tape, const Tensor& m, int64_t i) {
  if (m.rank() != 2) shape_error("row", "expects rank 2, got " + shape_str(m.shape()));
  if (i < 0 || i >= m.dim(0)) {
    shape_error("row", "row " + std::to_string(i) + " out of range for " + shape_str(m.shape()));
  }
  const int64_t c = m.dim(1);
  const Tensor ins[] = {m};
  Tensor out = tape.make_output({c}, ins);
  std::copy_n(m.data().data() + i * c, c, out.mutable_data().data());
  tape.record(out, [m, out, i, c](GradStore& store) {
    if (!m.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& gm = store.get(m.impl());
    for (int64_t j = 0; j < c; ++j) gm[i * c + j] += g[j];
  });
  return out;
}

Tensor gather_rows(Tape& tape, const Tensor& m, std::span<const int64_t> indices) {
  if (m.rank() != 2) shape_error("gather_rows", "expects rank 2, got " + shape_str(m.shape()));
  if (indices.empty()) shape_error("gather_rows", "needs at least one index");
  const int64_t c = m.dim(1);
  for (int64_t i : indices) {
    if (i < 0 || i >= m.dim(0)) {
      shape_error("gather_rows", "row " + std::to_string(i) + " out of range for " + shape_str(m.shape()));
    }
  }
  const int64_t k = static_cast<int64_t>(indices.size());
  const Tensor ins[] = {m};
  Tensor out = tape.make_output({k, c}, ins);
  double* po = out.mutable_data().data();
  const double* pm = m.data().data();
  auto idx = std::make_shared<std::vector<int64_t>>(indices.begin(), indices.end());
  for (int64_t r = 0; r < k; ++r) std::copy_n(pm + (*idx)[static_cast<size_t>(r)] * c, c, po + r * c);
  tape.record(out, [m, out, idx, c](GradStore& store) {
    if (!m.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& gm = store.get(m.impl());
    for (size_t r = 0; r < idx->size(); ++r)
      for (int64_t j = 0; j < c; ++j) gm[(*idx)[r] * c + j] += g[static_cast<int64_t>(r) * c + j];
  });
  return out;
}

Tensor pick(Tape& tape, const Tensor& a, int64_t flat_index) {
  if (flat_index < 0 || flat_index >= a.numel()) {
    shape_error("pick", "flat index " + std::to_string(flat_index) + " out of range for " + shape_str(a.shape()));
  }
  const Tensor ins[] = {a};
  Tensor out = tape.make_output({1}, ins);
  out.mutable_data()[0] = a.data()[static_cast<size_t>(flat_index)];
  tape.record(out, [a, out, flat_index](GradStore& store) {
    if (!a.impl()->tracked) return;
    const double g = (*store.find(out.impl()))[0];
    store.get(a.impl())[static_cast<size_t>(flat_index)] += g;
  });
  return out;
}

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, int64_t stride, int64_t pad) {
  if (input.rank() != 3) shape_error("conv2d", "input must be HxWxCin, got " + shape_str(input.shape()));
  if (weight.rank() != 4) shape_error("conv2d", "weight must be KhxKwxCinxCout, got " + shape_str(weight.shape()));
  if (input.dim(2) != weight.dim(2)) {
    shape_error("conv2d", "channel mismatch: input " + shape_str(input.shape()) + " vs weight " +
                              shape_str(weight.shape()));
  }
  if (stride < 1) shape_error("conv2d", "stride must be >= 1");
  if (pad < 0) shape_error("conv2d", "pad must be >= 0");
  const int64_t H = input.dim(0), W = input.dim(1), Ci = input.dim(2);
  const int64_t Kh = weight.dim(0), Kw = weight.dim(1), Co = weight.dim(3);
  const int64_t Ho = (H + 2 * pad - Kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - Kw) / stride + 1;
  if (H + 2 * pad < Kh || W + 2 * pad < Kw) {
    shape_error("conv2d", "kernel " + shape_str(weight.shape()) + " larger than padded input " +
                              shape_str(input.shape()));
  }
  const Tensor ins[] = {input, weight};
  Tensor out = tape.make_output({Ho, Wo, Co}, ins);
  const double* pi = input.data().data();
  const double* pw = weight.data().data();
  double* po = out.mutable_data().data();
  for (int64_t oh = 0; oh < Ho; ++oh) {
    for (int64_t ow = 0; ow < Wo; ++ow) {
      double* ocell = po + (oh * Wo + ow) * Co;
      for (int64_t kh = 0; kh < Kh; ++kh) {
        const int64_t ih = oh * stride - pad + kh;
        if (ih < 0 || ih >= H) continue;
        for (int64_t kw = 0; kw < Kw; ++kw) {
          const int64_t iw = ow * stride - pad + kw;
          if (iw < 0 || iw >= W) continue;
          const double* icell = pi + (ih * W + iw) * Ci;
          const double* wtap = pw + (kh * Kw + kw) * Ci * Co;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const double v = icell[ci];
            const double* wrow = wtap + ci * Co;
            for (int64_t co = 0; co < Co; ++co) ocell[co] += v * wrow[co];
          }
        }
      }
    }
  }
  tape.record(out, [input, weight, out, stride, pad, H, W, Ci, Kh, Kw, Co, Ho, Wo](GradStore& store) {
    const auto& g = *store.find(out.impl());
    const bool need_in = input.impl()->tracked;
    const bool need_w = weight.impl()->tracked;
    if (!need_in && !need_w) return;
    std::vector<double>* gi = need_in ? &store.get(input.impl()) : nullptr;
    std::vector<double>* gw = need_w ? &store.get(weight.impl()) : nullptr;
    const double* pi = input.data().data();
    const double* pw = weight.data().data();
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const double* gcell = g.data() + (oh * Wo + ow) * Co;
        for (int64_t kh = 0; kh < Kh; ++kh) {
          const int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          for (int64_t kw = 0; kw < Kw; ++kw) {
            const int64_t iw = ow * stride - pad + kw;
            if (iw < 0 || iw >= W) continue;
            const int64_t icell = (ih * W + iw) * Ci;
            const int64_t wtap = (kh * Kw + kw) * Ci * Co;
            for (int64_t ci = 0; ci < Ci; ++ci) {
              const double v = pi[icell + ci];
              const double* wrow = pw + wtap + ci * Co;
              double acc = 0.0;
              for (int64_t co = 0; co < Co; ++co) {
                const double gv = gcell[co];
                if (need_w) (*gw)[wtap + ci * Co + co] += v * gv;
                acc += wrow[co] * gv;
              }
              if (need_in) (*gi)[icell + ci] += acc;
            }
          }
        }
      }
    }
  });
  return out;
}

Tensor bilinear_sample(Tape& tape, const Tensor& map, const Tensor& points) {
  if (map.rank() != 3) shape_error("bilinear_sample", "map must be HxWxC, got " + shape_str(map.shape()));
  if (points.rank() != 2 || points.dim(1) != 2) {
    shape_error("bilinear_sample", "points must be kx2, got " + shape_str(points.shape()));
  }
  const int64_t H = map.dim(0), W = map.dim(1), C = map.dim(2);
  const int64_t k = points.dim(0);
  for (double v : points.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("bilinear_sample: non-finite coordinate");
  }
  struct SamplePlan {
    int64_t i0, i1, j0, j1;
    double fr, fc;
    bool free_r, free_c;  // false where the coordinate was clamped
  };
  auto plans = std::make_shared<std::vector<SamplePlan>>(static_cast<size_t>(k));
  const double* pp = points.data().data();
  const double* pm = map.data().data();
  const Tensor ins[] = {map, points};
  Tensor out = tape.make_output({k, C}, ins);
  double* po = out.mutable_data().data();
  for (int64_t p = 0; p < k; ++p) {
    const double r = pp[p * 2 + 0];
    const double c = pp[p * 2 + 1];
    SamplePlan& pl = (*plans)[static_cast<size_t>(p)];
    pl.free_r = (r >= 0.0 && r <= static_cast<double>(H - 1));
    pl.free_c = (c >= 0.0 && c <= static_cast<double>(W - 1));
    const double rr = std::clamp(r, 0.0, static_cast<double>(H - 1));
    const double cc = std::clamp(c, 0.0, static_cast<double>(W - 1));
    pl.i0 = std::min(static_cast<int64_t>(std::floor(rr)), std::max<int64_t>(H - 2, 0));
    pl.j0 = std::min(static_cast<int64_t>(std::floor(cc)), std::max<int64_t>(W - 2, 0));
    pl.i1 = std::min(pl.i0 + 1, H - 1);
    pl.j1 = std::min(pl.j0 + 1, W - 1);
    pl.fr = rr - static_cast<double>(pl.i0);
    pl.fc = cc - static_cast<double>(pl.j0);
    const double w00 = (1.0 - pl.fr) * (1.0 - pl.fc);
    const double w01 = (1.0 - pl.fr) * pl.fc;
    const double w10 = pl.fr * (1.0 - pl.fc);
    const double w11 = pl.fr * pl.fc;
    const double* m00 = pm + (pl.i0 * W + pl.j0) * C;
    const double* m01 = pm + (pl.i0 * W + pl.j1) * C;
    const double* m10 = pm + (pl.i1 * W + pl.j0) * C;
    const double* m11 = pm + (pl.i1 * W + pl.j1) * C;
    double* ocell = po + p * C;
    for (int64_t ch = 0; ch < C; ++ch) {
      ocell[ch] = w00 * m00[ch] + w01 * m01[ch] + w10 * m10[ch] + w11 * m11[ch];
    }
  }
  tape.record(out, [map, points, out, plans, W, C, k](GradStore& store) {
    const auto& g = *store.find(out.impl());
    const bool need_map = map.impl()->tracked;
    const bool need_pts = points.impl()->tracked;
    if (!need_map && !need_pts) return;
    std::vector<double>* gm = need_map ? &store.get(map.impl()) : nullptr;
    std::vector<double>* gp = need_pts ? &store.get(points.impl()) : nullptr;
    const double* pm = map.data().data();
    for (int64_t p = 0; p < k; ++p) {
      const SamplePlan& pl = (*plans)[static_cast<size_t>(p)];
      const double w00 = (1.0 - pl.fr) * (1.0 - pl.fc);
      const double w01 = (1.0 - pl.fr) * pl.fc;
      const double w10 = pl.fr * (1.0 - pl.fc);
      const double w11 = pl.fr * pl.fc;
      const int64_t o00 = (pl.i0 * W + pl.j0) * C;
      const int64_t o01 = (pl.i0 * W + pl.j1) * C;
      const int64_t o10 = (pl.i1 * W + pl.j0) * C;
      const int64_t o11 = (pl.i1 * W + pl.j1) * C;
      const double* gcell = g.data() + p * C;
      double dr = 0.0, dc = 0.0;
      for (int64_t ch = 0; ch < C; ++ch) {
        const double gv = gcell[ch];
        if (need_map) {
          (*gm)[o00 + ch] += w00 * gv;
          (*gm)[o01 + ch] += w01 * gv;
          (*gm)[o10 + ch] += w10 * gv;
          (*gm)[o11 + ch] += w11 * gv;
        }
        if (need_pts) {
          dr += gv * ((1.0 - pl.fc) * (pm[o10 + ch] - pm[o00 + ch]) + pl.fc * (pm[o11 + ch] - pm[o01 + ch]));
          dc += gv * ((1.0 - pl.fr) * (pm[o01 + ch] - pm[o00 + ch]) + pl.fr * (pm[o11 + ch] - pm[o10 + ch]));
        }
      }
      if (need_pts) {
        if (pl.free_r) (*gp)[p * 2 + 0] += dr;
        if (pl.free_c) (*gp)[p * 2 + 1] += dc;
      }
    }
  });
  return out;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_error("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  const Tensor ins[] = {a};
  Tensor out = tape.make_output(std::move(shape), ins);
  std::copy(a.data().begin(), a.data().end(), out.mutable_data().begin());
  tape.record(out, [a, out](GradStore& store) {
    if (!a.impl()->tracked) return;
    accumulate(store, a, *store.find(out.impl()));
  });
  return out;
}

Tensor normalize(Tape& tape, const Tensor& v) {
  if (v.rank() != 1) shape_error("normalize", "expects rank 1, got " + shape_str(v.shape()));
  double s = 0.0;
  for (double x : v.data()) s += x;
  if (!(s > 0.0)) throw std::invalid_argument("normalize: sum must be positive, got " + std::to_string(s));
  const Tensor ins[] = {v};
  Tensor out = tape.make_output(v.shape(), ins);
  const double* pv = v.data().data();
  double* po = out.mutable_data().data();
  const int64_t n = v.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pv[i] / s;
  tape.record(out, [v, out, s, n](GradStore& store) {
    if (!v.impl()->tracked) return;
    const auto& g = *store.find(out.impl());
    auto& gv = store.get(v.impl());
    const double* y = out.data().data();
    double dot = 0.0;
    for (int64_t i = 0; i < n; ++i) dot += g[i] * y[i];
    for (int64_t i = 0; i < n; ++i) gv[i] += (g[i] - dot) / s;
  });
  return out;
}

namespace {

using Handler = std::function<Tensor(Tape&, std::span<const Tensor>, const OpAttrs&)>;

void want(const char* op, std::span<const Tensor> inputs, size_t n) {
  if (inputs.size() != n) {
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(n) + " inputs, got " +
                                std::to_string(inputs.size()));
  }
}

const std::unordered_map<std::string_view, Handler>& dispatch_table() {
  static const std::unordered_map<std::string_view, Handler> table = {
      {"matmul", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("matmul", in, 2); return matmul(t, in[0], in[1]); }},
      {"transpose", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("transpose", in, 1); return transpose(t, in[0]); }},
      {"add", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("add", in, 2); return add(t, in[0], in[1]); }},
      {"sub", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("sub", in, 2); return sub(t, in[0], in[1]); }},
      {"mul", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("mul", in, 2); return mul(t, in[0], in[1]); }},
      {"bias_add", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("bias_add", in, 2);
         return bias_add(t, in[0], in[1], a.ints.empty() ? -1 : static_cast<int>(a.ints[0]));
       }},
      {"sigmoid", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("sigmoid", in, 1); return sigmoid(t, in[0]); }},
      {"tanh", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("tanh", in, 1); return tanh(t, in[0]); }},
      {"exp", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("exp", in, 1); return exp(t, in[0]); }},
      {"log", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("log", in, 1); return log(t, in[0]); }},
      {"relu", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("relu", in, 1); return relu(t, in[0]); }},
      {"scale", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) { want("scale", in, 1); return scale(t, in[0], a.value); }},
      {"softmax", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("softmax", in, 1); return softmax(t, in[0]); }},
      {"sum", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("sum", in, 1);
         return sum(t, in[0], a.ints.empty() ? -1 : static_cast<int>(a.ints[0]));
       }},
      {"max_rect", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("max_rect", in, 1);
         if (a.ints.size() != 4) throw std::invalid_argument("max_rect: attrs must be {r0,c0,r1,c1}");
         return max_rect(t, in[0], a.ints[0], a.ints[1], a.ints[2], a.ints[3]);
       }},
      {"concat", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { return concat(t, in); }},
      {"stack_rows", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { return stack_rows(t, in); }},
      {"row", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("row", in, 1);
         if (a.ints.size() != 1) throw std::invalid_argument("row: attrs must be {index}");
         return row(t, in[0], a.ints[0]);
       }},
      {"gather_rows", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("gather_rows", in, 1);
         return gather_rows(t, in[0], a.ints);
       }},
      {"pick", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("pick", in, 1);
         if (a.ints.size() != 1) throw std::invalid_argument("pick: attrs must be {flat_index}");
         return pick(t, in[0], a.ints[0]);
       }},
      {"conv2d", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("conv2d", in, 2);
         if (a.ints.size() != 2) throw std::invalid_argument("conv2d: attrs must be {stride,pad}");
         return conv2d(t, in[0], in[1], a.ints[0], a.ints[1]);
       }},
      {"bilinear_sample", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) {
         want("bilinear_sample", in, 2);
         return bilinear_sample(t, in[0], in[1]);
       }},
      {"reshape", [](Tape& t, std::span<const Tensor> in, const OpAttrs& a) {
         want("reshape", in, 1);
         return reshape(t, in[0], Shape(a.ints.begin(), a.ints.end()));
       }},
      {"normalize", [](Tape& t, std::span<const Tensor> in, const OpAttrs&) { want("normalize", in, 1); return normalize(t, in[0]); }},
  };
  return table;
}

}  // namespace

Tensor apply_primitive(Tape& tape, std::string_view op, std::span<const Tensor> inputs,
                       const OpAttrs& attrs) {
  const auto& table = dispatch_table();
  auto it = table.find(op);
  if (it == table.end()) throw std::invalid_argument("unknown primitive '" + std::string(op) + "'");
  return it->second(tape, inputs, attrs);
}

const std::vector<std::string_view>& primitive_ids() {
  static const std::vector<std::string_view> ids = [] {
    std::vector<std::string_view> v;
    for (const auto& [k, _] : dispatch_table()) v.push_back(k);
    std::sort(v.begin(), v.end());
    return v;
  }();
  return ids;
}

}  // namespace attncap
