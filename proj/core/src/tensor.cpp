#include "spotdiff/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "spotdiff/error.hpp"

namespace spotdiff {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (int d : shape) {
    if (d < 0) throw ConfigError("negative tensor dimension in " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->value.assign(static_cast<std::size_t>(spotdiff::numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (spotdiff::numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ConfigError("tensor data size " + std::to_string(values.size()) +
                      " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

int Tensor::dim(int i) const {
  const int n = ndim();
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw ConfigError("dimension index out of range for " + shape_str(shape()));
  return node_->shape[i];
}

std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (node_->value.size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = node_->requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::reshape(Shape shape) const {
  if (spotdiff::numel(shape) != numel()) {
    throw ConfigError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  auto out = detail::make_result(std::move(shape), {this});
  out->value = node_->value;
  if (out->requires_grad) {
    detail::Node* self = out.get();
    detail::Node* src = node_.get();
    out->backward = [self, src] {
      auto& g = src->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self->grad[i];
    };
  }
  return Tensor(std::move(out));
}

void Tensor::backward() const {
  if (node_->value.size() != 1) {
    throw ConfigError("backward() requires a scalar, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward();
  }
  for (detail::Node* n : order) {
    if (!n->leaf) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

namespace detail {

std::shared_ptr<Node> make_result(Shape shape, std::initializer_list<const Tensor*> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->leaf = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) {
      if (t && t->defined() && t->requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const Tensor* t : inputs) {
        if (t && t->defined()) node->parents.push_back(t->node_ptr());
      }
    }
  }
  return node;
}

std::shared_ptr<Node> make_result(Shape shape, const std::vector<Tensor>& inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->leaf = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) {
      if (t.defined() && t.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const Tensor& t : inputs) {
        if (t.defined()) node->parents.push_back(t.node_ptr());
      }
    }
  }
  return node;
}

}  // namespace detail

}  // namespace spotdiff
