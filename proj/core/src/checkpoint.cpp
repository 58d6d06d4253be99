#include "fot/checkpoint.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

namespace fot {

namespace {
constexpr char kMagic[8] = {'F', 'O', 'T', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const std::string& kind,
                     const std::string& meta_json, const std::string& config_hash,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  nlohmann::json header;
  header["kind"] = kind;
  header["config_hash"] = config_hash;
  header["meta"] = nlohmann::json::parse(meta_json.empty() ? "{}" : meta_json);
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t->shape();
    table.push_back(entry);
  }
  header["tensors"] = table;
  const std::string hs = header.dump();

  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write checkpoint: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  if (!out) fail("checkpoint write failed: " + path.string());
}

namespace {
nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail("not a checkpoint file: " + path.string());
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) fail("truncated checkpoint header: " + path.string());
  return nlohmann::json::parse(hs);
}
}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint: " + path.string());
  const nlohmann::json header = read_header(in, path);

  Checkpoint ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.config_hash = header.at("config_hash").get<std::string>();
  ck.meta_json = header.at("meta").dump();
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) fail("truncated checkpoint tensor '" + name + "': " + path.string());
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

std::string checkpoint_config_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint: " + path.string());
  return read_header(in, path).at("config_hash").get<std::string>();
}

}  // namespace fot
