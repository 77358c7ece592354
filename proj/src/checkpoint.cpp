#include "hanjabridge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace hb {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'H', 'B', 'C', 'K', 'P', 'T', '\r', '\n'};

template <typename T>
void put(std::string& out, const T& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

struct Writer {
  nlohmann::json index = nlohmann::json::array();
  std::string payload;

  template <typename T>
  void add(const std::string& name, std::vector<std::size_t> shape, const T* data, std::size_t count) {
    nlohmann::json t;
    t["name"] = name;
    t["dtype"] = sizeof(T) == 4 ? "f32" : "f64";
    t["shape"] = shape;
    t["offset"] = payload.size();
    t["count"] = count;
    index.push_back(std::move(t));
    payload.append(reinterpret_cast<const char*>(data), count * sizeof(T));
  }
};

struct Header {
  nlohmann::json json;
  std::string payload;
};

Header read_file(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError(path.string() + ": not a checkpoint file");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw CheckpointError(path.string() + ": truncated header");
  Header h;
  try {
    h.json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  if (with_payload) h.payload.assign(std::istreambuf_iterator<char>(in), {});
  return h;
}

const nlohmann::json* find_tensor(const nlohmann::json& index, std::string_view name) {
  for (const auto& t : index) {
    if (t.at("name").get<std::string>() == name) return &t;
  }
  return nullptr;
}

template <typename T>
void read_tensor(const Header& h, const nlohmann::json& t, T* out, std::size_t expected_count) {
  const std::string dtype = t.at("dtype");
  if (dtype != (sizeof(T) == 4 ? "f32" : "f64")) throw CheckpointError("tensor dtype mismatch for " + t.at("name").get<std::string>());
  const std::size_t count = t.at("count");
  const std::size_t offset = t.at("offset");
  if (count != expected_count) {
    throw CheckpointError("shape mismatch for tensor " + t.at("name").get<std::string>() + ": file has " +
                          std::to_string(count) + " values, expected " + std::to_string(expected_count));
  }
  if (offset + count * sizeof(T) > h.payload.size()) throw CheckpointError("truncated checkpoint payload");
  std::memcpy(out, h.payload.data() + offset, count * sizeof(T));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Params<float>& params, std::uint64_t step,
                     const AdamState<float>* optimizer, const InstanceQueue* queue, const nlohmann::json& extra) {
  Writer w;
  for (const auto& t : params.layout.tensors) w.add(t.name, t.shape, params.ptr(t.offset), t.size);

  nlohmann::json header;
  header["format"] = "hanjabridge-checkpoint";
  header["config"] = params.config;
  header["step"] = step;
  if (optimizer) {
    if (optimizer->m.size() != params.count()) throw CheckpointError("optimizer state does not match parameters");
    header["adam"] = {{"lr", optimizer->config.lr},
                      {"beta1", optimizer->config.beta1},
                      {"beta2", optimizer->config.beta2},
                      {"eps", optimizer->config.eps},
                      {"grad_clip", optimizer->config.grad_clip},
                      {"step", optimizer->step}};
    w.add("adam.m", {params.count()}, optimizer->m.data(), optimizer->m.size());
    w.add("adam.v", {params.count()}, optimizer->v.data(), optimizer->v.size());
  }
  if (queue) {
    nlohmann::json keys = nlohmann::json::array();
    std::vector<double> flat;
    flat.reserve(queue->size() * queue->dim());
    for (const auto& e : queue->entries()) {
      keys.push_back({e.key.sequence, e.key.position});
      flat.insert(flat.end(), e.vector.begin(), e.vector.end());
    }
    header["queue"] = {{"capacity", queue->capacity()}, {"dim", queue->dim()}, {"keys", keys}};
    w.add("queue.vectors", {queue->size(), queue->dim()}, flat.data(), flat.size());
  }
  header["extra"] = extra;
  header["tensors"] = w.index;

  const std::string text = header.dump();
  std::string out(kMagic, 8);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  out += w.payload;

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return read_file(path, false).json; }

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  const Header h = read_file(path, true);
  Checkpoint ck;
  ModelConfig config;
  try {
    config = h.json.at("config").get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad config: " + e.what());
  } catch (const ModelError& e) {
    throw CheckpointError(path.string() + ": bad config: " + e.what());
  }
  if (expected && !expected->same_shape(config)) {
    throw CheckpointError(path.string() + ": shape mismatch against the provided config (file vocab_size=" +
                          std::to_string(config.vocab_size) + ", expected " + std::to_string(expected->vocab_size) +
                          ")");
  }
  ck.params.config = config;
  ck.params.layout = ParamLayout::build(config);
  ck.params.data.assign(ck.params.layout.total, 0.0f);
  const auto& index = h.json.at("tensors");
  for (const auto& t : ck.params.layout.tensors) {
    const auto* entry = find_tensor(index, t.name);
    if (!entry) throw CheckpointError(path.string() + ": missing tensor " + t.name);
    read_tensor(h, *entry, ck.params.ptr(t.offset), t.size);
  }
  ck.step = h.json.at("step");
  if (h.json.contains("adam")) {
    const auto& a = h.json["adam"];
    AdamState<float> opt;
    opt.config.lr = a.at("lr");
    opt.config.beta1 = a.at("beta1");
    opt.config.beta2 = a.at("beta2");
    opt.config.eps = a.at("eps");
    opt.config.grad_clip = a.at("grad_clip");
    opt.reset(ck.params.count());
    opt.step = a.at("step");
    const auto* m = find_tensor(index, "adam.m");
    const auto* v = find_tensor(index, "adam.v");
    if (!m || !v) throw CheckpointError(path.string() + ": optimizer moments missing");
    read_tensor(h, *m, opt.m.data(), opt.m.size());
    read_tensor(h, *v, opt.v.data(), opt.v.size());
    ck.optimizer = std::move(opt);
  }
  if (h.json.contains("queue")) {
    const auto& q = h.json["queue"];
    InstanceQueue queue(q.at("capacity").get<std::size_t>(), q.at("dim").get<std::size_t>());
    const auto& keys = q.at("keys");
    std::vector<double> flat(keys.size() * queue.dim());
    const auto* t = find_tensor(index, "queue.vectors");
    if (!t) throw CheckpointError(path.string() + ": queue vectors missing");
    read_tensor(h, *t, flat.data(), flat.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
      queue.push({keys[i][0].get<std::uint64_t>(), keys[i][1].get<std::uint32_t>()},
                 std::span<const double>(flat.data() + i * queue.dim(), queue.dim()));
    }
    ck.queue = std::move(queue);
  }
  if (h.json.contains("extra")) ck.extra = h.json["extra"];
  return ck;
}

}  // namespace hb
