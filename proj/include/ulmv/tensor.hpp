#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ulmv/error.hpp"

namespace ulmv {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorStorage {
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  // Tape registration of this storage as a leaf. Valid only while
  // tape_stamp matches the stamp of the live tape.
  std::uint64_t tape_stamp = 0;
  int tape_node = -1;
};

}  // namespace detail

/// Dense N-dimensional array of 64-bit reals, row-major with the last axis
/// fastest. Copies are shallow: all copies share one element buffer and one
/// gradient buffer. Reshaping produces a new handle onto the same buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  static Tensor from_values(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const;  // negative indices count from the back
  int64_t numel() const { return shape_numel(shape_); }

  double* data() { return st_->data.data(); }
  const double* data() const { return st_->data.data(); }
  double& operator[](int64_t i) { return st_->data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return st_->data[static_cast<size_t>(i)]; }
  const std::vector<double>& values() const { return st_->data; }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  Tensor& set_requires_grad(bool v = true);

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  /// Gradient buffer, allocated and zeroed on first access.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();
  void accumulate_grad(const double* g, int64_t n);

  /// New handle onto the same buffers with a different shape (same numel).
  Tensor reshaped(Shape new_shape) const;
  /// Deep copy of the element buffer; gradient state is not copied.
  Tensor clone() const;

  /// Throws std::runtime_error naming `what` if any element is NaN/Inf.
  void check_finite(const char* what) const;

  bool same_storage(const Tensor& other) const { return st_ == other.st_; }
  detail::TensorStorage* storage() const { return st_.get(); }

 private:
  Shape shape_;
  std::shared_ptr<detail::TensorStorage> st_;
};

/// Reverse-mode gradient tape. Ops executed while a TapeScope is active
/// append nodes; backward() replays them once in reverse topological order
/// and accumulates (+=) into the grad buffer of every participating leaf.
class Tape {
 public:
  Tape();

  using BackwardFn = std::function<void(Tape&, const std::vector<double>& dy)>;

  /// Node for a computed tensor. `parents` may contain -1 entries for
  /// non-differentiable inputs; the backward fn must skip those.
  int push_node(const char* op, std::vector<int> parents, int64_t out_numel,
                BackwardFn backward);

  /// Tape id for `t`: its recorded node if it is an intermediate of this
  /// tape, a (possibly new) leaf node if it requires grad, -1 otherwise.
  int id_of(const Tensor& t);

  /// Per-backward gradient buffer of a node, zero-initialised on first use.
  std::vector<double>& grad_buffer(int id);

  void add_to_buffer(int id, const double* g, int64_t n);

  /// Seeds d(loss)/d(loss)=1 and sweeps the tape once in reverse order.
  /// Leaf tensors receive their gradients via accumulate_grad, so a second
  /// backward() without zero_grad doubles the stored leaf gradients.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  std::uint64_t stamp() const { return stamp_; }

 private:
  struct Node {
    const char* op;
    std::vector<int> parents;
    int64_t numel;
    BackwardFn backward;  // null for leaves
    Tensor leaf;          // defined for leaves only
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> buffers_;
  std::uint64_t stamp_;
};

/// RAII installer of the thread-local active tape.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

/// Sets the node id of `t` on the active tape; no-op when id < 0.
void bind_node(Tensor& t, int id);

/// Deterministic splitmix64-based RNG. Identical sequences on every
/// platform, unlike the unspecified std:: distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next_u64();
  double uniform();  // [0,1)
  double uniform(double lo, double hi);
  double normal();
  std::int64_t uniform_int(std::int64_t n);  // [0,n)
  Rng fork(std::uint64_t stream) const;

  template <class T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[static_cast<size_t>(i)],
                v[static_cast<size_t>(uniform_int(i + 1))]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

/// Deterministic parallel loop: [0,n) is split into contiguous chunks, one
/// chunk per worker. Safe only when fn(i) writes disjoint locations.
/// Worker count is min(ULMV_THREADS or hardware_concurrency, n).
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn);

int max_threads();

}  // namespace ulmv
