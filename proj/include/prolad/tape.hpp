#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "prolad/errors.hpp"
#include "prolad/tensor.hpp"

namespace prolad {

class Tape;

namespace detail {
inline thread_local std::vector<Tape*> tape_stack;
inline thread_local int no_grad_depth = 0;
}  // namespace detail

// Records primitive operations in execution order (hence topological order:
// an op's inputs always exist before its output). One tape per training
// iteration; never shared across threads.
class Tape {
public:
  Tape() { detail::tape_stack.push_back(this); }
  ~Tape() {
    if (!detail::tape_stack.empty() && detail::tape_stack.back() == this) {
      detail::tape_stack.pop_back();
    }
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() {
    return detail::tape_stack.empty() ? nullptr : detail::tape_stack.back();
  }

  // True when ops should record: a tape is active and grads are not disabled.
  static bool recording() { return current() != nullptr && detail::no_grad_depth == 0; }

  // Registers a backward rule and claims `out` as a non-leaf intermediate.
  void record(Tensor out, std::function<void()> backward_fn) {
    out.ptr()->is_leaf = false;
    intermediates_.push_back(out.ptr());
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep. Leaf grads accumulate across calls; intermediate
  // grads are reset per call so replays stay exact.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad() || loss.ptr()->is_leaf) {
      throw ContractError("backward: loss is not a recorded tape output");
    }
    if (nodes_.empty()) throw ContractError("backward: tape is empty");
    for (auto& t : intermediates_) t->grad.assign(t->data.size(), 0.0);
    loss.ptr()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorData>> intermediates_;
};

// RAII scope that suppresses recording (e.g. teacher capture, inference).
struct NoGrad {
  NoGrad() { ++detail::no_grad_depth; }
  ~NoGrad() { --detail::no_grad_depth; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

}  // namespace prolad
