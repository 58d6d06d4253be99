#include "fot/datamodel.hpp"

#include <algorithm>
#include <fstream>

#include "fot/image_io.hpp"

namespace fot {

namespace fs = std::filesystem;

std::string to_string(SplitRole r) {
  switch (r) {
    case SplitRole::base: return "base";
    case SplitRole::val: return "val";
    case SplitRole::novel: return "novel";
  }
  return "?";
}

SplitRole split_role_from_string(const std::string& s) {
  if (s == "base") return SplitRole::base;
  if (s == "val") return SplitRole::val;
  if (s == "novel") return SplitRole::novel;
  fail("unknown split role '" + s + "' (expected base|val|novel)");
}

std::optional<SplitRole> SplitConfig::role_of(const std::string& class_name) const {
  if (base_classes.count(class_name)) return SplitRole::base;
  if (val_classes.count(class_name)) return SplitRole::val;
  if (novel_classes.count(class_name)) return SplitRole::novel;
  return std::nullopt;
}

void SplitConfig::validate() const {
  for (const auto& c : base_classes)
    if (val_classes.count(c) || novel_classes.count(c))
      fail("split config: class '" + c + "' assigned to more than one partition");
  for (const auto& c : val_classes)
    if (novel_classes.count(c))
      fail("split config: class '" + c + "' assigned to more than one partition");
}

SplitConfig make_split(const std::vector<std::string>& class_names, int n_base, int n_val,
                       int n_novel, std::uint64_t seed) {
  if (n_base < 0 || n_val < 0 || n_novel < 0)
    fail("make_split: negative partition size");
  if (static_cast<std::size_t>(n_base) + n_val + n_novel != class_names.size())
    fail("make_split: partition sizes sum to " + std::to_string(n_base + n_val + n_novel) +
         " but there are " + std::to_string(class_names.size()) + " classes");
  std::vector<std::string> names = class_names;
  Rng rng(seed);
  rng.shuffle(names);
  SplitConfig split;
  int i = 0;
  for (; i < n_base; ++i) split.base_classes.insert(names[static_cast<std::size_t>(i)]);
  for (; i < n_base + n_val; ++i) split.val_classes.insert(names[static_cast<std::size_t>(i)]);
  for (; i < n_base + n_val + n_novel; ++i)
    split.novel_classes.insert(names[static_cast<std::size_t>(i)]);
  split.validate();
  return split;
}

SplitConfig read_split_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open split file: " + path.string());
  SplitConfig split;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos)
      fail("split file " + path.string() + ":" + std::to_string(lineno) + ": expected <class>,<role>");
    const std::string name = line.substr(0, comma);
    const SplitRole role = split_role_from_string(line.substr(comma + 1));
    switch (role) {
      case SplitRole::base: split.base_classes.insert(name); break;
      case SplitRole::val: split.val_classes.insert(name); break;
      case SplitRole::novel: split.novel_classes.insert(name); break;
    }
  }
  split.validate();
  return split;
}

void write_split_file(const fs::path& path, const SplitConfig& split) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path);
  if (!out) fail("cannot write split file: " + path.string());
  // single sorted listing, stable across runs
  std::map<std::string, SplitRole> rows;
  for (const auto& c : split.base_classes) rows[c] = SplitRole::base;
  for (const auto& c : split.val_classes) rows[c] = SplitRole::val;
  for (const auto& c : split.novel_classes) rows[c] = SplitRole::novel;
  for (const auto& [name, role] : rows) out << name << "," << to_string(role) << "\n";
}

DatasetRegistry DatasetRegistry::load(const fs::path& root, const SplitConfig& split,
                                      bool pin_pixels) {
  if (!fs::is_directory(root)) fail("dataset root is not a directory: " + root.string());
  split.validate();

  std::vector<std::string> class_names;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_names.push_back(entry.path().filename().string());
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) fail("dataset root has no class directories: " + root.string());

  DatasetRegistry reg;
  int next_class_id = 0;
  for (const auto& cname : class_names) {
    const auto role = split.role_of(cname);
    if (!role) fail("unassigned class '" + cname + "': present on disk but absent from split");
    const int cid = next_class_id++;
    reg.class_to_id_[cname] = cid;

    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(root / cname))
      if (entry.is_regular_file() && has_image_extension(entry.path()))
        files.push_back(entry.path().filename().string());
    std::sort(files.begin(), files.end());

    for (const auto& fname : files) {
      Record rec;
      rec.class_name = cname;
      rec.file_name = fname;
      rec.class_id = cid;
      rec.role = *role;
      rec.path = root / cname / fname;
      rec.id = cname + "/" + fs::path(fname).stem().string();
      Tensor pixels;
      try {
        pixels = load_image(rec.path);
      } catch (const Error& e) {
        log_warn(std::string("skipping unreadable image: ") + e.what());
        ++reg.stats_.n_skipped;
        continue;
      }
      if (reg.index_.count(rec.id)) fail("duplicate sample id: " + rec.id);
      reg.index_[rec.id] = reg.records_.size();
      if (pin_pixels) reg.pinned_[rec.id] = std::move(pixels);
      reg.records_.push_back(std::move(rec));
      ++reg.stats_.n_images;
    }
  }
  reg.stats_.n_classes = next_class_id;
  for (const auto& rec : reg.records_) reg.by_class_[rec.class_id].push_back(rec.id);
  if (reg.stats_.n_skipped > 0)
    log_warn(std::to_string(reg.stats_.n_skipped) + " unreadable image(s) skipped");
  return reg;
}

const DatasetRegistry::Record& DatasetRegistry::record(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) fail("unknown sample id: " + id);
  return records_[it->second];
}

ImageSample DatasetRegistry::sample(const std::string& id) const {
  const Record& rec = record(id);
  ImageSample s;
  s.id = rec.id;
  s.class_id = rec.class_id;
  s.split_role = rec.role;
  auto it = pinned_.find(id);
  s.pixels = it != pinned_.end() ? it->second : load_image(rec.path);
  return s;
}

std::vector<std::string> DatasetRegistry::ids_with_role(SplitRole role) const {
  std::vector<std::string> out;
  for (const auto& rec : records_)
    if (rec.role == role) out.push_back(rec.id);
  return out;
}

std::vector<int> DatasetRegistry::class_ids_with_role(SplitRole role) const {
  std::set<int> s;
  for (const auto& rec : records_)
    if (rec.role == role) s.insert(rec.class_id);
  return {s.begin(), s.end()};
}

std::vector<std::string> DatasetRegistry::ids_of_class(int class_id) const {
  auto it = by_class_.find(class_id);
  if (it == by_class_.end()) return {};
  return it->second;
}

std::string DatasetRegistry::class_name(int class_id) const {
  for (const auto& [name, id] : class_to_id_)
    if (id == class_id) return name;
  fail("unknown class id: " + std::to_string(class_id));
}

Episode sample_episode(const DatasetRegistry& registry, int n_way, int k_shot, int n_query,
                       std::uint64_t seed) {
  if (n_way < 1 || k_shot < 1 || n_query < 0) fail("sample_episode: invalid task shape");
  std::vector<int> novel = registry.class_ids_with_role(SplitRole::novel);
  // only classes with enough samples are eligible
  std::vector<int> eligible;
  for (int cid : novel)
    if (static_cast<int>(registry.ids_of_class(cid).size()) >= k_shot + n_query)
      eligible.push_back(cid);
  if (static_cast<int>(eligible.size()) < n_way) {
    std::string msg = "sample_episode: need " + std::to_string(n_way) +
                      " novel classes with >= " + std::to_string(k_shot + n_query) +
                      " samples, have " + std::to_string(eligible.size());
    for (int cid : novel)
      if (static_cast<int>(registry.ids_of_class(cid).size()) < k_shot + n_query)
        msg += "; deficient class " + registry.class_name(cid) + " (" +
               std::to_string(registry.ids_of_class(cid).size()) + " samples)";
    fail(msg);
  }

  Rng rng(seed);
  std::vector<int> chosen = eligible;
  rng.shuffle(chosen);
  chosen.resize(static_cast<std::size_t>(n_way));
  std::sort(chosen.begin(), chosen.end());

  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  for (int i = 0; i < n_way; ++i) ep.label_map[chosen[static_cast<std::size_t>(i)]] = i;
  for (int cid : chosen) {
    std::vector<std::string> ids = registry.ids_of_class(cid);
    rng.shuffle(ids);
    for (int k = 0; k < k_shot; ++k)
      ep.support.push_back(registry.sample(ids[static_cast<std::size_t>(k)]));
    for (int q = 0; q < n_query; ++q)
      ep.query.push_back(registry.sample(ids[static_cast<std::size_t>(k_shot + q)]));
  }
  return ep;
}

}  // namespace fot
