#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hifuse {

using Index = std::int64_t;
using Shape = std::vector<Index>;

enum class ErrorKind {
  InvalidArgument,
  Shape,
  Io,
  Format,
  VersionMismatch,
  MissingParameter,
  UnexpectedParameter,
  Numeric,
  State,
  CheckFailed,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Counter-based generator: draw k of a stream is a pure function of
/// (seed, k), so the state is two integers and replays bit-exactly.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double next_uniform();
  /// Standard normal via Box-Muller (one draw per pair of uniforms).
  double next_normal();

  bool operator==(const RngState&) const = default;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
};

/// Dense row-major tensor handle. Copies share storage; operations never
/// modify their inputs, so a produced tensor is immutable in practice.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(const Shape& shape) { return Tensor(shape, T(0)); }
  static Tensor ones(const Shape& shape) { return Tensor(shape, T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(node().shape.size()); }
  /// Size of dimension `axis`; negative axes count from the back.
  Index dim(int axis) const;
  Index numel() const { return static_cast<Index>(node().data.size()); }

  std::span<const T> data() const { return node().data; }
  /// Direct write access, for parameter updates and test fixtures only.
  std::span<T> mutable_data() { return node().data; }
  T item() const;
  T at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return node().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().grad; }
  void zero_grad() { node().grad.clear(); }

  /// Fresh storage with the same values, detached from any tape.
  Tensor clone() const;
  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(node().data.begin(), node().data.end());
    return Tensor<U>(node().shape, std::move(out));
  }

  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }
  TensorNode<T>& node() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <class T>
struct TapeRecord {
  const char* op = "";
  std::shared_ptr<TensorNode<T>> output;
  std::function<void(const std::vector<T>& grad_out)> backward;
};

/// Ordered log of differentiable operations. Operations append to the
/// tape that is active on the calling thread (see TapeScope); with no
/// active tape nothing is recorded and no gradients are tracked.
template <class T>
class Tape {
 public:
  void push(TapeRecord<T> rec) { records_.push_back(std::move(rec)); }
  void backward(const Tensor<T>& loss);
  void clear();
  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<TapeRecord<T>> records_;
  bool consumed_ = false;
};

template <class T>
Tape<T>* active_tape();

template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Reverse pass from a scalar loss through the active tape.
template <class T>
void backward(const Tensor<T>& loss);

/// When enabled, every operation checks its output for NaN/Inf and throws
/// an Error naming the operation.
void set_nan_check(bool on);
bool nan_check_enabled();

/// Multiply-accumulate counters fed by conv2d, linear and matmul while a
/// FlopCounterScope is alive on the thread.
struct FlopTally {
  std::uint64_t conv = 0;
  std::uint64_t linear = 0;
  std::uint64_t matmul = 0;
  std::uint64_t total() const { return conv + linear + matmul; }
};

class FlopCounterScope {
 public:
  explicit FlopCounterScope(FlopTally& tally);
  ~FlopCounterScope();
  FlopCounterScope(const FlopCounterScope&) = delete;
  FlopCounterScope& operator=(const FlopCounterScope&) = delete;

 private:
  FlopTally* previous_;
};

FlopTally* active_flop_tally();

/// N(0, std^2) truncated to [-2 std, 2 std] by rejection.
template <class T>
Tensor<T> trunc_normal_init(const Shape& shape, double stddev, RngState& rng);

namespace detail {

template <class T>
T* grad_buffer(TensorNode<T>& node);

template <class T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs);

/// Marks `out` as differentiable and records its backward rule on the
/// active tape when any input requires grad; runs the NaN check.
template <class T>
Tensor<T> finish(Tensor<T> out, const char* op, bool track,
                 std::function<void(const std::vector<T>&)> backward_rule);

}  // namespace detail

}  // namespace hifuse
