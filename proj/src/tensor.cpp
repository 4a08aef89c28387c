#include "ulmv/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace ulmv {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (int64_t d : shape_)
    require(d > 0, "Tensor: extents must be positive, got " + shape_str(shape_));
  st_ = std::make_shared<detail::TensorStorage>();
  st_->data.assign(static_cast<size_t>(shape_numel(shape_)), fill);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
  Tensor t(shape);
  require(static_cast<int64_t>(values.size()) == t.numel(),
          "Tensor: value count " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
  t.st_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double v) { return from_values({1}, {v}); }

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  require(i >= 0 && i < r, "Tensor::dim: axis out of range");
  return shape_[static_cast<size_t>(i)];
}

Tensor& Tensor::set_requires_grad(bool v) {
  st_->requires_grad = v;
  return *this;
}

std::vector<double>& Tensor::grad() {
  if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
  return st_->grad;
}

const std::vector<double>& Tensor::grad() const {
  const_cast<Tensor*>(this)->grad();
  return st_->grad;
}

void Tensor::zero_grad() {
  st_->grad.assign(st_->data.size(), 0.0);
}

void Tensor::accumulate_grad(const double* g, int64_t n) {
  require(n == numel(), "accumulate_grad: length mismatch");
  auto& gr = grad();
  for (int64_t i = 0; i < n; ++i) gr[static_cast<size_t>(i)] += g[i];
}

Tensor Tensor::reshaped(Shape new_shape) const {
  require(shape_numel(new_shape) == numel(),
          "reshape: " + shape_str(shape_) + " -> " + shape_str(new_shape) +
              " changes element count");
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.st_ = st_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(shape_);
  t.st_->data = st_->data;
  return t;
}

void Tensor::check_finite(const char* what) const {
  for (double v : st_->data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value in ") + what);
    }
  }
}

// ---------------------------------------------------------------------------
// Tape

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tape::Tape() : stamp_(g_tape_counter.fetch_add(1)) {}

int Tape::push_node(const char* op, std::vector<int> parents, int64_t out_numel,
                    BackwardFn backward) {
  Node nd;
  nd.op = op;
  nd.parents = std::move(parents);
  nd.numel = out_numel;
  nd.backward = std::move(backward);
  nodes_.push_back(std::move(nd));
  return static_cast<int>(nodes_.size()) - 1;
}

int Tape::id_of(const Tensor& t) {
  if (!t.defined()) return -1;
  auto* st = t.storage();
  if (st->tape_stamp == stamp_ && st->tape_node >= 0) return st->tape_node;
  if (!st->requires_grad) return -1;
  // register as a leaf
  Node nd;
  nd.op = "leaf";
  nd.numel = t.numel();
  nd.leaf = t;
  nodes_.push_back(std::move(nd));
  int id = static_cast<int>(nodes_.size()) - 1;
  st->tape_stamp = stamp_;
  st->tape_node = id;
  return id;
}

std::vector<double>& Tape::grad_buffer(int id) {
  auto& buf = buffers_[static_cast<size_t>(id)];
  if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].numel), 0.0);
  return buf;
}

void Tape::add_to_buffer(int id, const double* g, int64_t n) {
  if (id < 0) return;
  auto& buf = grad_buffer(id);
  for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[i];
}

void Tape::backward(const Tensor& loss) {
  require(loss.numel() == 1,
          "backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  auto* st = loss.storage();
  require(st->tape_stamp == stamp_ && st->tape_node >= 0,
          "backward: loss is not a node of this tape");

  buffers_.assign(nodes_.size(), {});
  grad_buffer(st->tape_node)[0] = 1.0;

  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    auto& buf = buffers_[static_cast<size_t>(id)];
    if (buf.empty()) continue;  // node not on the path from loss
    Node& nd = nodes_[static_cast<size_t>(id)];
    if (nd.backward) {
      nd.backward(*this, buf);
    } else if (nd.leaf.defined()) {
      nd.leaf.accumulate_grad(buf.data(), nd.numel);
    }
    buf.clear();
    buf.shrink_to_fit();
  }
  buffers_.clear();
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

void bind_node(Tensor& t, int id) {
  if (id < 0) return;
  Tape* tp = active_tape();
  if (!tp) return;
  t.storage()->tape_stamp = tp->stamp();
  t.storage()->tape_node = id;
}

// ---------------------------------------------------------------------------
// Rng

std::uint64_t Rng::next_u64() {
  // splitmix64
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  // Box-Muller
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
  cached_normal_ = r * std::sin(theta);
  have_cached_normal_ = true;
  return r * std::cos(theta);
}

std::int64_t Rng::uniform_int(std::int64_t n) {
  require(n > 0, "Rng::uniform_int: n must be positive");
  // rejection sampling to avoid modulo bias
  std::uint64_t un = static_cast<std::uint64_t>(n);
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::int64_t>(x % un);
}

Rng Rng::fork(std::uint64_t stream) const {
  Rng r(state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
  r.next_u64();
  return r;
}

// ---------------------------------------------------------------------------
// Parallel loop

int max_threads() {
  static int cached = [] {
    if (const char* env = std::getenv("ULMV_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return cached;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_fn) {
  if (n <= 0) return;
  int workers = static_cast<int>(std::min<int64_t>(max_threads(), n));
  if (workers <= 1) {
    chunk_fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = std::min<int64_t>(lo + chunk, n);
    if (lo >= hi) break;
    pool.emplace_back([&chunk_fn, lo, hi] { chunk_fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace ulmv
