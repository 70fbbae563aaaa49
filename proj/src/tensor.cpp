#include "hifuse/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace hifuse {

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

// SplitMix64 evaluated at position `counter` of the stream keyed by `seed`.
std::uint64_t RngState::next_u64() {
  std::uint64_t z = seed + (counter + 1) * 0x9E3779B97F4A7C15ULL;
  ++counter;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double RngState::next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngState::next_normal() {
  const double u1 = 1.0 - next_uniform();  // (0, 1]
  const double u2 = next_uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  for (Index d : shape)
    if (d <= 0) fail(ErrorKind::Shape, "tensor dimensions must be positive, got " + shape_str(shape));
  node_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  node_->shape = std::move(shape);
}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
  for (Index d : shape)
    if (d <= 0) fail(ErrorKind::Shape, "tensor dimensions must be positive, got " + shape_str(shape));
  if (static_cast<Index>(data.size()) != shape_numel(shape))
    fail(ErrorKind::Shape, "data length " + std::to_string(data.size()) + " does not match shape " +
                               shape_str(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <class T>
TensorNode<T>& Tensor<T>::node() const {
  if (!node_) fail(ErrorKind::State, "use of an undefined tensor");
  return *node_;
}

template <class T>
Index Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r)
    fail(ErrorKind::InvalidArgument, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node().shape[static_cast<std::size_t>(a)];
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) fail(ErrorKind::Shape, "item() on tensor of shape " + shape_str(shape()));
  return node().data[0];
}

template <class T>
T Tensor<T>::at(std::initializer_list<Index> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) fail(ErrorKind::InvalidArgument, "index rank mismatch for " + shape_str(s));
  Index off = 0;
  std::size_t i = 0;
  for (Index v : idx) {
    if (v < 0 || v >= s[i]) fail(ErrorKind::InvalidArgument, "index out of range for " + shape_str(s));
    off = off * s[i] + v;
    ++i;
  }
  return node().data[static_cast<std::size_t>(off)];
}

template <class T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  node().requires_grad = on;
  return *this;
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>(shape(), node().data);
}

template class Tensor<float>;
template class Tensor<double>;

// ---- tape -------------------------------------------------------------------

namespace {

template <class T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

bool& nan_flag() {
  static bool flag = false;
  return flag;
}

FlopTally*& flop_slot() {
  thread_local FlopTally* slot = nullptr;
  return slot;
}

}  // namespace

template <class T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <class T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <class T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) fail(ErrorKind::State, "backward called twice on the same tape without clear()");
  if (loss.numel() != 1 || loss.rank() > 1)
    fail(ErrorKind::Shape, "backward requires a scalar loss, got " + shape_str(loss.shape()));
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(records_.size()) - 1; i >= 0; --i) {
    if (records_[static_cast<std::size_t>(i)].output == loss.node_ptr()) {
      start = i;
      break;
    }
  }
  if (start < 0) fail(ErrorKind::State, "loss tensor was not produced on this tape");
  consumed_ = true;
  auto& seed = loss.node();
  seed.grad.assign(1, T(1));
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    auto& rec = records_[static_cast<std::size_t>(i)];
    if (rec.output->grad.empty()) continue;
    rec.backward(rec.output->grad);
  }
}

template <class T>
void Tape<T>::clear() {
  records_.clear();
  consumed_ = false;
}

template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (!tape) fail(ErrorKind::State, "backward called with no active tape");
  tape->backward(loss);
}

template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

void set_nan_check(bool on) { nan_flag() = on; }
bool nan_check_enabled() { return nan_flag(); }

FlopCounterScope::FlopCounterScope(FlopTally& tally) : previous_(flop_slot()) { flop_slot() = &tally; }
FlopCounterScope::~FlopCounterScope() { flop_slot() = previous_; }
FlopTally* active_flop_tally() { return flop_slot(); }

template <class T>
Tensor<T> trunc_normal_init(const Shape& shape, double stddev, RngState& rng) {
  if (!(stddev > 0)) fail(ErrorKind::InvalidArgument, "trunc_normal_init requires std > 0");
  Tensor<T> out(shape);
  for (T& v : out.mutable_data()) {
    double z;
    do {
      z = rng.next_normal();
    } while (z < -2.0 || z > 2.0);
    v = static_cast<T>(z * stddev);
  }
  return out;
}

template Tensor<float> trunc_normal_init<float>(const Shape&, double, RngState&);
template Tensor<double> trunc_normal_init<double>(const Shape&, double, RngState&);

namespace detail {

template <class T>
T* grad_buffer(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad.data();
}

template <class T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const Tensor<T>* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <class T>
Tensor<T> finish(Tensor<T> out, const char* op, bool track,
                 std::function<void(const std::vector<T>&)> backward_rule) {
  if (nan_flag()) {
    for (T v : out.data())
      if (!std::isfinite(v)) fail(ErrorKind::Numeric, std::string("non-finite value produced by ") + op);
  }
  if (track) {
    out.set_requires_grad(true);
    active_tape<T>()->push(TapeRecord<T>{op, out.node_ptr(), std::move(backward_rule)});
  }
  return out;
}

template float* grad_buffer<float>(TensorNode<float>&);
template double* grad_buffer<double>(TensorNode<double>&);
template bool tracking<float>(std::initializer_list<const Tensor<float>*>);
template bool tracking<double>(std::initializer_list<const Tensor<double>*>);
template Tensor<float> finish<float>(Tensor<float>, const char*, bool,
                                     std::function<void(const std::vector<float>&)>);
template Tensor<double> finish<double>(Tensor<double>, const char*, bool,
                                       std::function<void(const std::vector<double>&)>);

}  // namespace detail

}  // namespace hifuse
