#pragma once

// Random compositions of the taped primitive set, for gradient certification.
// A graph is identified by a seed: replaying compose() with the same seed and
// leaves makes the same structural choices, so finite differences can
// re-evaluate it after perturbing leaf values.

#include <cmath>
#include <cstdint>
#include <vector>

#include "clarga/ops.hpp"
#include "clarga/rng.hpp"
#include "clarga/tensor.hpp"

namespace clarga::testing {

struct GraphLeaves {
  std::vector<Tensor> leaves;
};

// Leaves are 2-D with sides in [2, 4], values uniform in [-1, 1].
inline std::vector<Tensor> make_leaves(std::uint64_t seed) {
  Rng rng(seed * 7919 + 13);
  const std::size_t count = 2 + rng.below(2);
  std::vector<Tensor> leaves;
  const std::size_t r = 2 + rng.below(3), c = 2 + rng.below(3);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    leaves.push_back(Tensor::parameter({r, c}, std::move(v)));
  }
  return leaves;
}

inline Tensor random_like(const Shape& shape, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v));
}

// Number of distinct primitive kinds compose() draws from.
inline constexpr std::size_t kPrimitiveKinds = 20;

// Applies 3-6 random primitives to the leaves and reduces to a scalar.
// Sets *near_kink when a LeakyReLU input lies within 1e-3 of its kink, where
// finite differences are not meaningful.
inline Tensor compose(std::uint64_t seed, const std::vector<Tensor>& leaves,
                      bool* near_kink = nullptr,
                      std::vector<std::size_t>* kinds_used = nullptr) {
  Rng rng(seed);
  std::vector<Tensor> pool = leaves;
  auto pick = [&]() -> Tensor& { return pool[rng.below(pool.size())]; };
  const std::size_t steps = 3 + rng.below(4);
  for (std::size_t s = 0; s < steps; ++s) {
    Tensor x = pick();
    // Work on a 2-D view.
    if (x.rank() != 2) x = reshape(x, {x.numel() / x.shape().back(), x.shape().back()});
    const std::size_t r = x.dim(0), c = x.dim(1);
    const std::size_t kind = rng.below(kPrimitiveKinds);
    if (kinds_used) kinds_used->push_back(kind);
    Tensor y;
    switch (kind) {
      case 0: {
        Tensor o = pick();
        y = o.shape() == x.shape() ? add(x, o) : add(x, random_like(x.shape(), rng));
        break;
      }
      case 1: {
        Tensor o = pick();
        y = o.shape() == x.shape() ? sub(o, x) : sub(x, random_like(x.shape(), rng));
        break;
      }
      case 2: {
        Tensor o = pick();
        y = o.shape() == x.shape() ? mul(x, o) : mul(x, random_like(x.shape(), rng));
        break;
      }
      case 3: {
        if (near_kink)
          for (double v : x.data())
            if (std::abs(v) < 1e-3) *near_kink = true;
        y = leaky_relu(x, 0.01 + 0.3 * rng.uniform());
        break;
      }
      case 4: {
        const std::size_t k = 2 + rng.below(3);
        y = matmul(x, random_like({c, k}, rng));
        break;
      }
      case 5: {
        // Product of two taped operands: x * x^T.
        y = matmul(x, transpose(x));
        break;
      }
      case 6:
        y = bmm(reshape(x, {1, r, c}), reshape(transpose(x), {1, c, r}));
        y = reshape(y, {r, r});
        break;
      case 7: {
        Mask m(x.numel(), 0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) m[i * c + j] = rng.bernoulli(0.3);
        for (std::size_t i = 0; i < r; ++i) m[i * c + rng.below(c)] = 0;
        y = softmax_masked(x, m);
        break;
      }
      case 8:
        y = log_softmax(x);
        break;
      case 9:
        y = layer_norm(x, 1e-5);
        break;
      case 10: {
        Rng drop(seed + 99 + s);
        y = dropout(x, 0.25, true, drop);
        break;
      }
      case 11: {
        Tensor o = pick();
        y = concat({x, o.rank() == 2 && o.dim(0) == r ? o : x});
        break;
      }
      case 12:
        y = sum_axis(reshape(x, {r, c, 1}), rng.below(2));
        break;
      case 13:
        y = add_rowwise(x, random_like({c}, rng));
        break;
      case 14: {
        Tensor s = reshape(sum_axis(sum_axis(x, 0), 0), {1});
        y = scale_by(x, scale(s, 0.3));
        break;
      }
      case 15:
        y = reshape(l2_norm(add_scalar(x, 0.5)), {r, 1});
        break;
      case 16:
        y = cosine_similarity(add_scalar(x, 0.1), random_like({3, c}, rng));
        break;
      case 17: {
        std::vector<std::pair<std::size_t, std::size_t>> idx;
        for (std::size_t i = 0; i < r + 1; ++i) idx.emplace_back(0, rng.below(r));
        y = gather_rows({x}, idx);
        break;
      }
      case 18:
        y = permute(reshape(x, {1, r, c}), {2, 0, 1});
        y = reshape(y, {c, r});
        break;
      default: {
        std::vector<std::size_t> t(r);
        for (auto& v : t) v = rng.below(c);
        y = reshape(nll_loss(log_softmax(x), t), {1, 1});
        break;
      }
    }
    y = scale(y, 1.0 / std::max(1.0, std::sqrt(static_cast<double>(y.numel()))));
    pool.push_back(y);
  }
  Tensor last = pool.back();
  return sum(mul(last, random_like(last.shape(), rng)));
}

}  // namespace clarga::testing
