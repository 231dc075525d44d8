#include "mdf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mdf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

using nlohmann::json;

void save_checkpoint(const std::string& path, const ParamStore& params, const json& meta) {
  json header;
  header["version"] = 1;
  header["meta"] = meta;
  json tensors = json::array();
  for (const auto& p : params.all()) {
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape}});
  }
  header["tensors"] = std::move(tensors);
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 8);
  const uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& p : params.all())
    out.write(reinterpret_cast<const char*>(p->value.data.data()),
              static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

namespace {

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  return json::parse(hs);
}

}  // namespace

json read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  return read_header(in, path)["meta"];
}

json load_checkpoint(const std::string& path, ParamStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  json header = read_header(in, path);
  for (const auto& t : header["tensors"]) {
    const std::string name = t["name"];
    const std::vector<int> shape = t["shape"].get<std::vector<int>>();
    Parameter* p = params.find(name);
    if (!p)
      throw std::runtime_error("checkpoint tensor " + name + " has no matching parameter; "
                               "the checkpoint was saved with a different configuration");
    if (p->value.shape != shape)
      throw std::runtime_error("checkpoint tensor " + name + " shape " + shape_str(shape) +
                               " does not match parameter shape " + shape_str(p->value.shape));
    in.read(reinterpret_cast<char*>(p->value.data.data()),
            static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint data: " + path);
    p->value.check_finite(("checkpoint tensor " + name).c_str());
  }
  return header["meta"];
}

}  // namespace mdf
