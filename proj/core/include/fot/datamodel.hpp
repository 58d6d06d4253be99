#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fot/tensor.hpp"

namespace fot {

enum class SplitRole { base, val, novel };

std::string to_string(SplitRole r);
SplitRole split_role_from_string(const std::string& s);

// One labeled image. `pixels` is (C,H,W) in [0,1]. `stage` tags where in the
// pipeline the pixels come from ("raw", "rb", "fg", "gen").
struct ImageSample {
  std::string id;
  int class_id = -1;
  Tensor pixels;
  SplitRole split_role = SplitRole::base;
  std::string stage = "raw";
  bool synthetic = false;
};

// Disjoint class partition. Class membership is by class name; ids are
// assigned lexicographically at load time.
struct SplitConfig {
  std::set<std::string> base_classes;
  std::set<std::string> val_classes;
  std::set<std::string> novel_classes;

  std::optional<SplitRole> role_of(const std::string& class_name) const;
  void validate() const;  // pairwise disjoint
};

SplitConfig make_split(const std::vector<std::string>& class_names, int n_base, int n_val,
                       int n_novel, std::uint64_t seed);

SplitConfig read_split_file(const std::filesystem::path& path);
void write_split_file(const std::filesystem::path& path, const SplitConfig& split);

// One N-way K-shot task. label_map sends original class ids to [0, N).
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  int n_query = 0;
  std::vector<ImageSample> support;
  std::vector<ImageSample> query;
  std::map<int, int> label_map;
};

// Immutable after load; decodes pixels on demand unless pinned.
class DatasetRegistry {
 public:
  struct Record {
    std::string id;  // "<class_name>/<file_stem>"
    std::string class_name;
    std::string file_name;
    int class_id = -1;
    SplitRole role = SplitRole::base;
    std::filesystem::path path;
  };

  struct LoadStats {
    int n_images = 0;
    int n_skipped = 0;
    int n_classes = 0;
  };

  static DatasetRegistry load(const std::filesystem::path& root, const SplitConfig& split,
                              bool pin_pixels = true);

  const std::vector<Record>& records() const { return records_; }
  const Record& record(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  // Decodes (or returns the pinned copy of) the sample's pixels.
  ImageSample sample(const std::string& id) const;

  std::vector<std::string> ids_with_role(SplitRole role) const;
  std::vector<int> class_ids_with_role(SplitRole role) const;
  std::vector<std::string> ids_of_class(int class_id) const;
  const std::map<std::string, int>& class_name_to_id() const { return class_to_id_; }
  std::string class_name(int class_id) const;
  int num_classes() const { return static_cast<int>(class_to_id_.size()); }
  const LoadStats& stats() const { return stats_; }

 private:
  std::vector<Record> records_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, int> class_to_id_;
  std::map<int, std::vector<std::string>> by_class_;
  std::map<std::string, Tensor> pinned_;
  LoadStats stats_;
};

Episode sample_episode(const DatasetRegistry& registry, int n_way, int k_shot, int n_query,
                       std::uint64_t seed);

}  // namespace fot
