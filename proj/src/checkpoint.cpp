#include "hifuse/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "hifuse/image_io.hpp"

namespace hifuse {

namespace {

const std::string kMomentPrefix[2] = {"optim.m.", "optim.v."};

template <class U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::Format, name_ + ": truncated checkpoint");
  }

 private:
  const std::string& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::string hft_bytes(const Tensor<float>& t) {
  std::ostringstream os;
  write_hft(os, t);
  return os.str();
}

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (const auto& n : names) out += (out.empty() ? "" : ", ") + n;
  return out;
}

}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out = "HFCK";
  put<std::uint32_t>(out, ckpt.version);
  put<std::int64_t>(out, ckpt.epoch);
  put<std::int64_t>(out, ckpt.step);
  put<std::uint64_t>(out, ckpt.rng.seed);
  put<std::uint64_t>(out, ckpt.rng.counter);
  put<double>(out, ckpt.best_metric);
  put_string(out, ckpt.config_text);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::vector<std::string> blobs;
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    blobs.push_back(hft_bytes(t));
    put_string(out, name);
    put<std::uint64_t>(out, offset);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    offset += blobs.back().size();
  }
  for (const auto& b : blobs) out += b;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& name) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "HFCK") != 0) fail(ErrorKind::Format, name + ": not a checkpoint file");
  Reader r(bytes, name);
  r.need(4);
  (void)r.get<std::uint32_t>();  // magic
  Checkpoint ck;
  ck.version = r.get<std::uint32_t>();
  if (ck.version != kCheckpointVersion)
    fail(ErrorKind::VersionMismatch, name + ": checkpoint format version " + std::to_string(ck.version) +
                                         ", this build reads version " + std::to_string(kCheckpointVersion));
  ck.epoch = r.get<std::int64_t>();
  ck.step = r.get<std::int64_t>();
  ck.rng.seed = r.get<std::uint64_t>();
  ck.rng.counter = r.get<std::uint64_t>();
  ck.best_metric = r.get<double>();
  ck.config_text = r.get_string();
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    std::uint64_t offset;
    Shape shape;
  };
  std::vector<Entry> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.get_string();
    e.offset = r.get<std::uint64_t>();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorKind::Format, name + ": bad rank for " + e.name);
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    manifest.push_back(std::move(e));
  }
  const std::size_t base = r.pos();
  for (const auto& e : manifest) {
    if (e.offset > bytes.size() - base) fail(ErrorKind::Format, name + ": offset out of range for " + e.name);
    const std::uint64_t len = 8 + 8 * e.shape.size() + 4 * static_cast<std::uint64_t>(shape_numel(e.shape));
    if (len > bytes.size() - base - e.offset) fail(ErrorKind::Format, name + ": truncated blob for " + e.name);
    std::istringstream is(bytes.substr(base + e.offset, len));
    Tensor<float> t = read_hft(is, name + ":" + e.name);
    if (t.shape() != e.shape) fail(ErrorKind::Format, name + ": manifest shape disagrees with blob for " + e.name);
    ck.tensors.emplace_back(e.name, std::move(t));
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename " + tmp + " to " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str(), path);
}

Checkpoint capture_checkpoint(const HiFuseModel<float>& model, const TrainState* state, const RunConfig& cfg) {
  Checkpoint ck;
  ck.config_text = to_config_text(cfg);
  const auto& entries = model.params().entries();
  for (const auto& e : entries) ck.tensors.emplace_back(e.name, e.tensor.clone());
  if (state) {
    ck.epoch = state->epoch;
    ck.step = state->optim.step;
    ck.rng = state->rng;
    ck.best_metric = state->best_metric;
    for (int which = 0; which < 2; ++which) {
      const auto& moments = which == 0 ? state->optim.m : state->optim.v;
      if (moments.size() != entries.size()) fail(ErrorKind::State, "optimizer state does not match the model");
      for (std::size_t i = 0; i < entries.size(); ++i)
        ck.tensors.emplace_back(kMomentPrefix[which] + entries[i].name, moments[i].clone());
    }
  }
  return ck;
}

void restore_checkpoint(const Checkpoint& ckpt, HiFuseModel<float>& model, TrainState* state) {
  auto& entries = model.params().entries();
  std::set<std::string> registry;
  for (const auto& e : entries) registry.insert(e.name);
  std::set<std::string> stored;
  std::vector<std::string> unexpected;
  bool has_moments = false;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.starts_with("optim.")) {
      has_moments = true;
      continue;
    }
    stored.insert(name);
    if (!registry.count(name)) unexpected.push_back(name);
  }
  std::vector<std::string> missing;
  for (const auto& e : entries)
    if (!stored.count(e.name)) missing.push_back(e.name);
  if (!missing.empty())
    fail(ErrorKind::MissingParameter, "checkpoint lacks " + std::to_string(missing.size()) +
                                          " model parameter(s): " + join(missing));
  if (!unexpected.empty())
    fail(ErrorKind::UnexpectedParameter, "checkpoint has " + std::to_string(unexpected.size()) +
                                             " parameter(s) the model does not: " + join(unexpected));
  std::vector<std::string> mismatched;
  for (const auto& e : entries) {
    const Tensor<float>* t = ckpt.find(e.name);
    if (t->shape() != e.tensor.shape())
      mismatched.push_back(e.name + " " + shape_str(t->shape()) + " vs " + shape_str(e.tensor.shape()));
  }
  if (!mismatched.empty()) fail(ErrorKind::Shape, "checkpoint shape mismatch: " + join(mismatched));
  if (state) {
    if (!has_moments) fail(ErrorKind::MissingParameter, "checkpoint carries no optimizer state to resume from");
    for (int which = 0; which < 2; ++which)
      for (const auto& e : entries) {
        const Tensor<float>* t = ckpt.find(kMomentPrefix[which] + e.name);
        if (!t) fail(ErrorKind::MissingParameter, "checkpoint lacks optimizer moment " + kMomentPrefix[which] + e.name);
        if (t->shape() != e.tensor.shape())
          fail(ErrorKind::Shape, "optimizer moment shape mismatch for " + e.name);
      }
  }

  for (auto& e : entries) {
    const Tensor<float>* t = ckpt.find(e.name);
    std::copy(t->data().begin(), t->data().end(), e.tensor.mutable_data().begin());
  }
  if (state) {
    state->optim.init(model.params());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto* m = ckpt.find(kMomentPrefix[0] + entries[i].name);
      const auto* v = ckpt.find(kMomentPrefix[1] + entries[i].name);
      std::copy(m->data().begin(), m->data().end(), state->optim.m[i].mutable_data().begin());
      std::copy(v->data().begin(), v->data().end(), state->optim.v[i].mutable_data().begin());
    }
    state->optim.step = ckpt.step;
    state->rng = ckpt.rng;
    state->epoch = static_cast<int>(ckpt.epoch);
    state->best_metric = ckpt.best_metric;
  }
}

RunConfig checkpoint_config(const Checkpoint& ckpt) { return parse_config_text(ckpt.config_text); }

}  // namespace hifuse
