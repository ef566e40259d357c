#include "mxacl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace mxacl {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, &buf_[pos_], sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void bytes(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, &buf_[pos_], n);
    pos_ += n;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const MultiExitModel& model) {
  Writer w;
  w.bytes("MXAC", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto params = model.parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p->name.size()));
    w.bytes(p->name.data(), p->name.size());
    const Shape& s = p->value.shape();
    w.put<std::uint8_t>(static_cast<std::uint8_t>(s.size()));
    for (std::size_t d : s) w.put<std::uint64_t>(d);
    w.put<std::uint8_t>(0);
    w.bytes(p->value.data().data(), p->value.size() * sizeof(double));
  }
  nlohmann::json meta{{"model", model.config()},
                      {"stage1_complete", model.stage1_complete()},
                      {"metadata", model.metadata()}};
  const std::string blob = meta.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob.data(), blob.size());
  return w.take();
}

MultiExitModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "MXAC", 4) != 0) throw IoError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::map<std::string, Tensor> tensors;
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint16_t>(), '\0');
    r.bytes(name.data(), name.size());
    Shape shape(r.get<std::uint8_t>());
    for (std::size_t& d : shape) d = r.get<std::uint64_t>();
    if (r.get<std::uint8_t>() != 0) throw IoError("checkpoint: unsupported dtype for " + name);
    Tensor t(shape);
    r.bytes(t.data().data(), t.size() * sizeof(double));
    order.push_back(name);
    tensors.emplace(name, std::move(t));
  }
  std::string blob(r.get<std::uint32_t>(), '\0');
  r.bytes(blob.data(), blob.size());
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad config blob: ") + e.what());
  }
  MultiExitModel model(meta.at("model").get<ModelConfig>(), 0);
  const auto params = model.parameters();
  if (params.size() != order.size()) throw IoError("checkpoint: tensor count does not match config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != order[i]) throw IoError("checkpoint: unexpected tensor " + order[i]);
    Parameter* p = model.find(order[i]);
    Tensor& t = tensors.at(order[i]);
    if (t.shape() != p->value.shape()) throw IoError("checkpoint: shape mismatch for " + order[i]);
    p->value = std::move(t);
  }
  model.set_stage1_complete(meta.at("stage1_complete").get<bool>());
  model.metadata() = meta.at("metadata");
  return model;
}

void save_checkpoint(const MultiExitModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

MultiExitModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace mxacl
