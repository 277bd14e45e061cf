#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "attncap/tape.hpp"
#include "attncap/tensor.hpp"

namespace attncap {

// Differentiable primitives. Each records its backward closure on the tape.
// Inputs are never mutated; shape violations throw std::invalid_argument
// naming the offending shapes.

// matmul supports (m,k)x(k,n)->(m,n), (m,k)x(k)->(m) and (k)x(k,n)->(n).
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);

// Broadcast-add of a vector along one axis of a rank>=1 tensor.
// axis == -1 addresses the trailing axis; for rank-2 inputs axis 0 adds
// v[i] to row i and axis 1 adds v[j] to column j.
Tensor bias_add(Tape& tape, const Tensor& a, const Tensor& v, int axis = -1);

Tensor sigmoid(Tape& tape, const Tensor& a);
Tensor tanh(Tape& tape, const Tensor& a);
Tensor exp(Tape& tape, const Tensor& a);
Tensor log(Tape& tape, const Tensor& a);
Tensor relu(Tape& tape, const Tensor& a);
Tensor scale(Tape& tape, const Tensor& a, double c);

// Softmax over all entries jointly (max-subtracted); output has a's shape.
Tensor softmax(Tape& tape, const Tensor& a);

// axis == -1 sums everything to a single-element tensor; for rank-2 inputs
// axis 0 sums columns away (result length = #cols? no: result[j] = sum_i a[i][j])
// -- axis names the dimension that is reduced.
Tensor sum(Tape& tape, const Tensor& a, int axis = -1);

// Channelwise max over the inclusive cell rectangle [r0,r1]x[c0,c1] of an
// HxWxC map. Ties resolve to the lowest row-major cell.
Tensor max_rect(Tape& tape, const Tensor& map, int64_t r0, int64_t c0,
                int64_t r1, int64_t c1);

Tensor concat(Tape& tape, std::span<const Tensor> vectors);
Tensor stack_rows(Tape& tape, std::span<const Tensor> rows);

// Row gather (embedding lookup) and friends.
Tensor row(Tape& tape, const Tensor& m, int64_t i);
Tensor gather_rows(Tape& tape, const Tensor& m, std::span<const int64_t> indices);
Tensor pick(Tape& tape, const Tensor& a, int64_t flat_index);

// 2-D convolution on an HxWxCin map with a KhxKwxCinxCout filter bank,
// zero padding `pad` on each border and stride >= 1.
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight,
              int64_t stride, int64_t pad);

// Bilinear interpolation of `map` (HxWxC) at k (row, col) points given in
// feature-map coordinates. Coordinates are clamped to [0,H-1]x[0,W-1] before
// interpolation; the point gradient is zero along any clamped coordinate.
Tensor bilinear_sample(Tape& tape, const Tensor& map, const Tensor& points);

Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

// x / sum(x) for a 1-D tensor with positive sum.
Tensor normalize(Tape& tape, const Tensor& v);

// Attribute block for the generic dispatch entry point.
struct OpAttrs {
  std::vector<int64_t> ints;  // axis / stride / pad / indices / target shape
  double value = 0.0;         // scale factor
};

// String-keyed dispatch over the primitive set above. Unknown ids throw.
Tensor apply_primitive(Tape& tape, std::string_view op,
                       std::span<const Tensor> inputs, const OpAttrs& attrs = {});

const std::vector<std::string_view>& primitive_ids();

}  // namespace attncap
