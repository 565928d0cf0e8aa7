#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clarga/errors.hpp"

namespace clarga {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty until the first gradient accumulation.
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

// Dense row-major array of doubles. Copies share storage; use clone() for a
// deep copy. Values of tensors produced outside a tape are never mutated by
// the library.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access, for parameter updates and test perturbations.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Value copy detached from any tape.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  Tensor clone() const {
    Tensor t = detach();
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  Tensor(Shape shape, std::vector<double> data)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  detail::ImplPtr impl_;
};

// Ordered record of taped operations. Entries are appended as operations run,
// so every entry's inputs precede it; backward() walks the record in reverse,
// visiting each entry once, then releases it.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape())
                                          : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward() on a loss that is not on the tape");
    }
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }

  void clear() { entries_.clear(); }

  // Makes a tape the thread's recording target for its lifetime.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_slot()) {
      active_slot() = &tape;
    }
    ~Scope() { active_slot() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<std::function<void()>> entries_;
};

inline void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

}  // namespace clarga
