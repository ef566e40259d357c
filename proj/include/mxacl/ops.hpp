#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mxacl/rng.hpp"
#include "mxacl/tape.hpp"

// Differentiable primitives. Every op checks its output for NaN/Inf and throws
// NumericError; shape mismatches throw ShapeError. "Row" ops act on the last
// axis and treat all leading axes as rows.
namespace mxacl::ops {

/// 2-D matrix product [n,k] x [k,m].
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double c);
/// Adds a length-C vector to every row of a tensor whose last axis is C.
Var add_row(Var x, Var bias);

Var tanh(Var x);
/// tanh-approximation GELU.
Var gelu(Var x);
Var exp(Var x);
Var log(Var x);

Var softmax(Var x);
Var log_softmax(Var x);
/// Row-wise log-softmax where only entries with include[r*C+c] != 0 enter the
/// normalizer. Excluded entries produce 0 and receive no gradient.
Var masked_log_softmax(Var x, std::span<const std::uint8_t> include);

/// Scalar mean / sum of all elements.
Var mean(Var x);
Var sum(Var x);

Var concat(const std::vector<Var>& parts, std::size_t axis);
/// Elements [begin, end) along `axis`.
Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
/// Rows `idx` of a tensor viewed as [rows, C].
Var select_rows(Var x, std::span<const std::size_t> idx);
/// out[r] = x[r, idx[r]] for a 2-D x.
Var pick(Var x, std::span<const std::size_t> idx);

/// Unit-norm rows. A row with norm < 1e-12 is a NumericError.
Var l2_normalize(Var x);
/// Inverted dropout in train mode; identity otherwise.
Var dropout(Var x, double rate, Rng& rng, bool train);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12);
/// Rows of `table` for each id; output shape [ids.size(), C].
Var embedding(Var table, std::span<const std::int32_t> ids);
/// Detached copy; gradients do not flow into `x`.
Var stop_gradient(Var x);

/// Multi-head scaled dot-product attention.
///
/// keys/values are [batch*key_len, D]; queries are [batch*query_len, D] with
/// D = heads*head_dim. key_mask has batch*key_len entries, 0 marks padding.
/// Output is [batch*query_len, D]. With query_len == 1 only the first position
/// attends, which is all an exit reading the [CLS] slot needs.
Var attention(Var queries, Var keys, Var values, std::span<const std::uint8_t> key_mask,
              std::size_t batch, std::size_t query_len, std::size_t key_len, std::size_t heads);

}  // namespace mxacl::ops
