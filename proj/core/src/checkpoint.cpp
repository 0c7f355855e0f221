#include "mglue/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>

#include "mglue/config.hpp"

namespace mglue {

using json = nlohmann::json;

namespace {

constexpr std::size_t kHeaderBytes = 16;  // magic + manifest length

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint64_t get_u64(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

struct Entry {
  std::string name;
  const Matrix* m;
};

std::vector<Entry> tensor_entries(const TrainState& s) {
  std::vector<Entry> out;
  for (const auto& [name, m] : s.params.all()) out.push_back({"param/" + name, &m});
  for (const auto& [name, m] : s.adam.first_moments()) out.push_back({"adam.m/" + name, &m});
  for (const auto& [name, m] : s.adam.second_moments()) out.push_back({"adam.v/" + name, &m});
  for (const auto& [domain, p] : s.protos) {
    out.push_back({"proto.z/" + domain, &p.z});
    out.push_back({"proto.log_g/" + domain, &p.log_g});
  }
  return out;
}

template <class T>
T field(const json& j, const char* key, std::size_t pos) {
  auto it = j.find(key);
  if (it == j.end()) throw CheckpointError(std::string("checkpoint manifest lacks '") + key + "'", pos);
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw CheckpointError(std::string("checkpoint manifest field '") + key + "' has the wrong type", pos);
  }
}

}  // namespace

std::string encode_checkpoint(const TrainState& state, const json& config) {
  json tensors = json::object();
  std::string blob;
  for (const Entry& e : tensor_entries(state)) {
    const std::size_t offset = blob.size();
    for (double v : e.m->values()) put_u64(blob, std::bit_cast<std::uint64_t>(v));
    tensors[e.name] = {{"shape", {e.m->rows(), e.m->cols()}}, {"offset", offset}, {"length", blob.size() - offset}};
  }
  json protos = json::array();
  for (const auto& [domain, p] : state.protos) protos.push_back({{"domain", domain}, {"update_count", p.update_count}});
  const json manifest = {{"format_version", kCheckpointFormatVersion},
                         {"config", config},
                         {"config_hash", config_hash(config)},
                         {"epoch", state.epoch},
                         {"adam_steps", state.adam.steps()},
                         {"rng_state", state.rng.state()},
                         {"prototypes", protos},
                         {"blob_bytes", blob.size()},
                         {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic);
  put_u64(out, text.size());
  out += text;
  out += blob;
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kHeaderBytes) throw CheckpointError("checkpoint truncated inside the header", bytes.size());
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CheckpointError("not a checkpoint (bad magic)", 0);
  const std::uint64_t mlen = get_u64(bytes, 8);
  if (mlen > bytes.size() - kHeaderBytes)
    throw CheckpointError("checkpoint truncated inside the manifest (" + std::to_string(mlen) + " bytes declared)",
                          bytes.size());

  Checkpoint ck;
  try {
    ck.manifest = json::parse(bytes.substr(kHeaderBytes, mlen));
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("corrupted checkpoint manifest: ") + e.what(),
                          kHeaderBytes + (e.byte > 0 ? e.byte - 1 : 0));
  }
  const json& m = ck.manifest;
  const std::size_t mpos = kHeaderBytes;
  if (!m.is_object()) throw CheckpointError("checkpoint manifest is not an object", mpos);
  const int version = field<int>(m, "format_version", mpos);
  if (version != kCheckpointFormatVersion)
    throw CheckpointError("unsupported checkpoint format_version " + std::to_string(version), mpos);
  if (!m.contains("config")) throw CheckpointError("checkpoint manifest lacks 'config'", mpos);

  const std::size_t blob_start = kHeaderBytes + mlen;
  const std::size_t blob_bytes = field<std::size_t>(m, "blob_bytes", mpos);
  if (bytes.size() - blob_start != blob_bytes)
    throw CheckpointError("checkpoint blob holds " + std::to_string(bytes.size() - blob_start) + " bytes, manifest declares " +
                              std::to_string(blob_bytes),
                          bytes.size());

  // Tensors must tile the blob in offset order.
  const json tensors = field<json>(m, "tensors", mpos);
  if (!tensors.is_object()) throw CheckpointError("checkpoint 'tensors' is not an object", mpos);
  struct Slot {
    std::string name;
    std::size_t rows, cols, offset, length;
  };
  std::vector<Slot> slots;
  for (auto it = tensors.begin(); it != tensors.end(); ++it) {
    const auto shape = field<std::vector<std::size_t>>(it.value(), "shape", mpos);
    if (shape.size() != 2) throw CheckpointError("tensor '" + it.key() + "' shape is not 2-D", mpos);
    slots.push_back({it.key(), shape[0], shape[1], field<std::size_t>(it.value(), "offset", mpos),
                     field<std::size_t>(it.value(), "length", mpos)});
  }
  std::sort(slots.begin(), slots.end(), [](const Slot& a, const Slot& b) { return a.offset < b.offset; });
  std::size_t cursor = 0;
  for (const Slot& s : slots) {
    if (s.offset != cursor)
      throw CheckpointError("tensor '" + s.name + "' leaves a gap or overlap in the blob", blob_start + s.offset);
    if (s.length != 8 * s.rows * s.cols)
      throw CheckpointError("tensor '" + s.name + "' length does not match its shape", blob_start + s.offset);
    cursor += s.length;
  }
  if (cursor != blob_bytes) throw CheckpointError("tensors do not cover the blob", blob_start + cursor);

  TrainState& st = ck.state;
  std::map<std::string, Prototype> protos;
  for (const Slot& s : slots) {
    std::vector<double> vals(s.rows * s.cols);
    for (std::size_t i = 0; i < vals.size(); ++i)
      vals[i] = std::bit_cast<double>(get_u64(bytes, blob_start + s.offset + 8 * i));
    Matrix mat(s.rows, s.cols, std::move(vals));
    const auto slash = s.name.find('/');
    const std::string kind = s.name.substr(0, slash), key = slash == std::string::npos ? "" : s.name.substr(slash + 1);
    if (kind == "param")
      st.params.set(key, std::move(mat));
    else if (kind == "adam.m")
      st.adam.first_moments()[key] = std::move(mat);
    else if (kind == "adam.v")
      st.adam.second_moments()[key] = std::move(mat);
    else if (kind == "proto.z")
      protos[key].z = std::move(mat);
    else if (kind == "proto.log_g")
      protos[key].log_g = std::move(mat);
    else
      throw CheckpointError("unknown tensor '" + s.name + "'", blob_start + s.offset);
  }
  for (const json& p : field<json>(m, "prototypes", mpos)) {
    const auto domain = field<std::string>(p, "domain", mpos);
    auto it = protos.find(domain);
    if (it == protos.end() || it->second.z.empty() || it->second.log_g.empty())
      throw CheckpointError("prototype '" + domain + "' has no tensors", mpos);
    it->second.domain = domain;
    it->second.update_count = field<std::int64_t>(p, "update_count", mpos);
  }
  for (auto& [domain, p] : protos)
    if (p.domain != domain) throw CheckpointError("prototype tensors for '" + domain + "' are not listed", mpos);
  st.protos = std::move(protos);
  st.epoch = field<int>(m, "epoch", mpos);
  st.adam.set_steps(field<std::int64_t>(m, "adam_steps", mpos));
  st.rng.set_state(field<std::string>(m, "rng_state", mpos));
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const json& config) {
  const std::string bytes = encode_checkpoint(state, config);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_checkpoint(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + std::string(e.what()).substr(0, std::string(e.what()).rfind(" (byte")),
                          e.position());
  }
}

}  // namespace mglue
