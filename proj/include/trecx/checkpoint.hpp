#pragma once

// Checkpoint files. Little-endian throughout:
//   "TRXC" | u32 version | u32 entry count
//   per entry: u16 name length | name | u8 dtype (0 f32, 1 f64, 2 u64) | u8 rank | rank x u64 dims | payload
//   u32 CRC-32 of every preceding byte

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "trecx/architecture.hpp"
#include "trecx/graph.hpp"
#include "trecx/io.hpp"
#include "trecx/training.hpp"

namespace trecx {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ckpt {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr char kMagic[4] = {'T', 'R', 'X', 'C'};

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U64 = 2 };

inline std::size_t width(DType t) { return t == DType::F32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else return DType::U64;
}

// One named array; payload holds little-endian element bytes.
struct Entry {
  std::string name;
  DType dtype = DType::U64;
  std::vector<std::uint64_t> dims;
  std::string payload;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

template <typename V>
Entry make_entry(std::string name, std::vector<std::uint64_t> dims, const V* data, std::size_t n) {
  Entry e{std::move(name), dtype_of<V>(), std::move(dims), {}};
  e.payload.reserve(n * sizeof(V));
  for (std::size_t i = 0; i < n; ++i) {
    if constexpr (std::is_same_v<V, float>) put_le(e.payload, std::bit_cast<std::uint32_t>(data[i]), 4);
    else if constexpr (std::is_same_v<V, double>) put_le(e.payload, std::bit_cast<std::uint64_t>(data[i]), 8);
    else put_le(e.payload, data[i], 8);
  }
  return e;
}

template <typename V>
std::vector<V> entry_values(const Entry& e) {
  if (e.dtype != dtype_of<V>()) throw CheckpointError("entry '" + e.name + "' has an unexpected dtype");
  std::vector<V> out(e.count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if constexpr (std::is_same_v<V, float>)
      out[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(e.payload.data() + 4 * i, 4)));
    else if constexpr (std::is_same_v<V, double>)
      out[i] = std::bit_cast<double>(get_le(e.payload.data() + 8 * i, 8));
    else
      out[i] = get_le(e.payload.data() + 8 * i, 8);
  }
  return out;
}

inline Entry scalar_entry(std::string name, std::uint64_t v) { return make_entry(std::move(name), {1}, &v, 1); }

// Text stored as u64 words: the byte length, then the bytes packed little-endian.
inline Entry text_entry(std::string name, const std::string& text) {
  std::vector<std::uint64_t> words(1 + (text.size() + 7) / 8, 0);
  words[0] = text.size();
  for (std::size_t i = 0; i < text.size(); ++i)
    words[1 + i / 8] |= static_cast<std::uint64_t>(static_cast<unsigned char>(text[i])) << (8 * (i % 8));
  return make_entry(std::move(name), {words.size()}, words.data(), words.size());
}

inline std::string entry_text(const Entry& e) {
  const auto words = entry_values<std::uint64_t>(e);
  if (words.empty() || words[0] > 8 * (words.size() - 1)) throw CheckpointError("entry '" + e.name + "' is malformed");
  std::string text(words[0], '\0');
  for (std::size_t i = 0; i < text.size(); ++i) text[i] = static_cast<char>((words[1 + i / 8] >> (8 * (i % 8))) & 0xff);
  return text;
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string serialize(const std::vector<Entry>& entries) {
  std::string out(kMagic, 4);
  put_le(out, kVersion, 4);
  put_le(out, entries.size(), 4);
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw CheckpointError("entry name too long: " + e.name);
    if (e.dims.size() > 0xff) throw CheckpointError("entry rank too large: " + e.name);
    if (e.payload.size() != e.count() * width(e.dtype)) throw CheckpointError("payload size mismatch: " + e.name);
    put_le(out, e.name.size(), 2);
    out += e.name;
    put_le(out, static_cast<std::uint8_t>(e.dtype), 1);
    put_le(out, e.dims.size(), 1);
    for (auto d : e.dims) put_le(out, d, 8);
    out += e.payload;
  }
  put_le(out, crc32_of(out), 4);
  return out;
}

inline std::vector<Entry> deserialize(const std::string& bytes, const std::string& origin) {
  auto fail = [&](std::size_t at, const std::string& why) {
    throw CheckpointError(origin + ": byte " + std::to_string(at) + ": " + why);
  };
  if (bytes.size() < 16) fail(0, "file too short");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(0, "bad magic");
  const std::size_t body = bytes.size() - 4;
  const auto stored = static_cast<std::uint32_t>(get_le(bytes.data() + body, 4));
  if (stored != crc32_of(bytes.substr(0, body))) fail(body, "CRC mismatch");
  const auto version = get_le(bytes.data() + 4, 4);
  if (version != kVersion) fail(4, "unsupported version " + std::to_string(version));
  const auto n = get_le(bytes.data() + 8, 4);
  std::size_t pos = 12;
  auto need = [&](std::uint64_t k) {
    if (k > body || pos > body - k) fail(pos, "truncated entry");
  };
  std::vector<Entry> entries;
  for (std::uint64_t i = 0; i < n; ++i) {
    Entry e;
    need(2);
    const auto len = get_le(bytes.data() + pos, 2);
    pos += 2;
    need(len + 2);
    e.name = bytes.substr(pos, len);
    pos += len;
    const auto dt = static_cast<std::uint8_t>(bytes[pos]);
    if (dt > 2) fail(pos, "unknown dtype " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
    const auto rank = static_cast<std::uint8_t>(bytes[pos + 1]);
    pos += 2;
    need(8 * rank);
    std::uint64_t count = 1;
    for (int r = 0; r < rank; ++r, pos += 8) {
      e.dims.push_back(get_le(bytes.data() + pos, 8));
      if (e.dims.back() != 0 && count > body / e.dims.back()) fail(pos, "entry dims exceed the file size");
      count *= e.dims.back();
    }
    const std::uint64_t size = count * width(e.dtype);
    need(size);
    e.payload = bytes.substr(pos, size);
    pos += size;
    entries.push_back(std::move(e));
  }
  if (pos != body) fail(pos, "trailing bytes after the last entry");
  return entries;
}

}  // namespace ckpt

template <typename T>
std::string checkpoint_bytes(const GraphModel<T>& model, const TrainState& state) {
  using ckpt::make_entry;
  std::vector<ckpt::Entry> entries;
  entries.push_back(ckpt::text_entry("meta/architecture", render_architecture(model.spec())));
  entries.push_back(ckpt::scalar_entry("meta/model_seed", model.seed()));
  entries.push_back(ckpt::scalar_entry("meta/fmap_concat", model.build_options().fmap_concat ? 1 : 0));
  entries.push_back(ckpt::scalar_entry("train/epoch", state.epoch));
  entries.push_back(ckpt::scalar_entry("train/adam_step", state.adam_step));
  entries.push_back(ckpt::scalar_entry("train/rng", state.rng));
  std::vector<double> hist;
  for (const auto& r : state.history)
    hist.insert(hist.end(), {static_cast<double>(r.epoch), r.loss, r.loss_ee, r.loss_ef, r.acc_ee, r.acc_ef,
                             r.transfer ? 1.0 : 0.0});
  entries.push_back(make_entry("train/history", {state.history.size(), 7}, hist.data(), hist.size()));
  for (const auto& p : model.params().entries()) {
    std::vector<std::uint64_t> dims(p.value.shape().dims().begin(), p.value.shape().dims().end());
    entries.push_back(make_entry("param/" + p.name, dims, p.value.data(), p.value.size()));
    if (!p.trainable) continue;
    entries.push_back(make_entry("adam_m/" + p.name, dims, p.m.data(), p.m.size()));
    entries.push_back(make_entry("adam_v/" + p.name, dims, p.v.data(), p.v.size()));
  }
  return ckpt::serialize(entries);
}

template <typename T>
void save_checkpoint(const GraphModel<T>& model, const TrainState& state, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_bytes(model, state));
}

template <typename T>
struct LoadedCheckpoint {
  GraphModel<T> model;
  TrainState state;
};

namespace ckpt {

inline const Entry& find(const std::map<std::string, const Entry*>& by_name, const std::string& name,
                         const std::string& origin) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw CheckpointError(origin + ": missing entry '" + name + "'");
  return *it->second;
}

inline std::uint64_t scalar(const std::map<std::string, const Entry*>& by_name, const std::string& name,
                            const std::string& origin) {
  const auto v = entry_values<std::uint64_t>(find(by_name, name, origin));
  if (v.size() != 1) throw CheckpointError(origin + ": entry '" + name + "' is not a scalar");
  return v[0];
}

// Copies stored tensors and optimizer state into `model`, whose architecture must
// match the stored echo exactly.
template <typename T>
TrainState restore(GraphModel<T>& target, const std::vector<Entry>& entries, const std::string& origin) {
  GraphModel<T> model = target;  // left untouched if anything below throws
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;

  const auto stored = entry_text(find(by_name, "meta/architecture", origin));
  const auto mine = render_architecture(model.spec());
  if (stored != mine) throw CheckpointError(origin + ": architecture mismatch: checkpoint holds\n" + stored);
  if ((scalar(by_name, "meta/fmap_concat", origin) != 0) != model.build_options().fmap_concat)
    throw CheckpointError(origin + ": build option mismatch (fmap_concat)");

  std::size_t expected = 7;
  auto load_into = [&](const std::string& name, Tensor<T>& dst) {
    const auto& e = find(by_name, name, origin);
    std::vector<std::uint64_t> dims(dst.shape().dims().begin(), dst.shape().dims().end());
    if (e.dims != dims) throw CheckpointError(origin + ": entry '" + name + "' has the wrong shape");
    if (e.dtype != dtype_of<T>()) throw CheckpointError(origin + ": entry '" + name + "' has the wrong dtype");
    dst.vec() = entry_values<T>(e);
    ++expected;
  };
  for (auto& p : model.params().entries()) {
    load_into("param/" + p.name, p.value);
    if (!p.trainable) continue;
    load_into("adam_m/" + p.name, p.m);
    load_into("adam_v/" + p.name, p.v);
  }
  if (expected != entries.size())
    throw CheckpointError(origin + ": checkpoint has " + std::to_string(entries.size()) + " entries, model expects " +
                          std::to_string(expected));

  TrainState s;
  s.epoch = scalar(by_name, "train/epoch", origin);
  s.adam_step = scalar(by_name, "train/adam_step", origin);
  s.rng = scalar(by_name, "train/rng", origin);
  const auto& h = find(by_name, "train/history", origin);
  const auto hv = entry_values<double>(h);
  if (h.dims.size() != 2 || h.dims[1] != 7) throw CheckpointError(origin + ": malformed history");
  for (std::size_t r = 0; r < h.dims[0]; ++r) {
    const double* row = hv.data() + 7 * r;
    s.history.push_back({static_cast<std::uint64_t>(row[0]), row[1], row[2], row[3], row[4], row[5], row[6] != 0});
  }
  target = std::move(model);
  return s;
}

}  // namespace ckpt

// Rebuilds the model from the stored architecture echo and restores all state.
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto origin = path.string();
  const auto entries = ckpt::deserialize(read_file_bytes(path), origin);
  std::map<std::string, const ckpt::Entry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  const auto spec = parse_architecture(ckpt::entry_text(ckpt::find(by_name, "meta/architecture", origin)), origin);
  BuildOptions opts;
  opts.fmap_concat = ckpt::scalar(by_name, "meta/fmap_concat", origin) != 0;
  auto model = GraphModel<T>::build(spec, ckpt::scalar(by_name, "meta/model_seed", origin), opts);
  auto state = ckpt::restore(model, entries, origin);
  return {std::move(model), std::move(state)};
}

// Restores into an existing model; a different architecture is a CheckpointError.
template <typename T>
TrainState restore_checkpoint(GraphModel<T>& model, const std::filesystem::path& path) {
  const auto origin = path.string();
  return ckpt::restore(model, ckpt::deserialize(read_file_bytes(path), origin), origin);
}

}  // namespace trecx
