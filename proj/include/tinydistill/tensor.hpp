#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tinydistill {

// Errors thrown by the tensor engine. shape_error covers dimension mismatches,
// contract_error covers violated call preconditions (non-scalar loss, bad
// epoch index, ...). Both derive from std::runtime_error so callers may catch
// broadly.
struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct contract_error : std::runtime_error {
  explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major tensor. A Tensor is a cheap handle onto shared storage so
// autograd closures and parameter registries can alias the same buffer; use
// clone() for an independent copy. Gradient buffers are allocated lazily.
template <class T>
class Tensor {
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until ensure_grad()
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(t.impl_->shape)), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->data) v = value;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
      throw shape_error("from_data: buffer of " + std::to_string(data.size()) +
                        " values does not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& storage() { return impl_->data; }
  const std::vector<T>& storage() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }
  T* grad() {
    ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<T>& grad_storage() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

  T item() const {
    if (numel() != 1) {
      throw contract_error("item: tensor " + shape_str(shape()) + " is not a scalar");
    }
    return impl_->data[0];
  }

  // Same storage, detached from gradient flow.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;  // value copy: detached view cannot alias training updates
    t.impl_->requires_grad = false;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    *t.impl_ = *impl_;
    return t;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// Records the backward rule of every differentiable op in execution order.
// backward() zeroes the grads of all op outputs first, so replaying is
// correct and repeated backward calls accumulate exactly one extra gradient
// into each leaf. A Tape is confined to one logical thread.
template <class T>
class Tape {
 public:
  void record(Tensor<T> output, std::function<void()> fn) {
    nodes_.push_back(Node{std::move(output), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Tensor<T> loss) {
    if (loss.numel() != 1) {
      throw contract_error("backward: loss has shape " + shape_str(loss.shape()) +
                           ", expected a scalar");
    }
    for (auto& n : nodes_) n.output.zero_grad();
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> output;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
};

template <class T>
void backward(Tensor<T> loss, Tape<T>& tape) {
  tape.backward(std::move(loss));
}

}  // namespace tinydistill
