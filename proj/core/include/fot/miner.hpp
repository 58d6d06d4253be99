#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fot/datamodel.hpp"
#include "fot/saliency.hpp"

namespace fot {

// Two same-class pairs from different classes whose endpoint saliency maps
// match: A1~B1 and A2~B2 in posture.
struct Quadruplet {
  std::string a1, a2, b1, b2;
  int class_a = -1, class_b = -1;

  void validate() const;
};

struct MinerConfig {
  int top_m = 5;            // B1 candidates per A1
  int match_h = 64;         // maps resized to match_h x match_w before distance
  int match_w = 64;
  int target_count = 50000; // quadruplets kept in the manifest
  int pairs_per_class = 64; // (A1,A2) sampling budget per base class
  std::uint64_t seed = 0;
};

// Euclidean distance between two maps after resizing both to match size.
double saliency_distance(const SaliencyMap& m1, const SaliencyMap& m2, int match_h, int match_w);

// Resized-map store used by the miner and partner search: id -> flat vector
// of match_h*match_w values. Built once, queried many times.
class MatchMapStore {
 public:
  MatchMapStore(int match_h, int match_w) : h_(match_h), w_(match_w) {}
  void put(const std::string& id, const SaliencyMap& map);
  bool contains(const std::string& id) const { return maps_.count(id) > 0; }
  double distance(const std::string& id1, const std::string& id2) const;
  double distance_to(const std::vector<double>& flat, const std::string& id) const;
  std::vector<double> flatten(const SaliencyMap& map) const;
  int match_h() const { return h_; }
  int match_w() const { return w_; }

 private:
  int h_, w_;
  std::map<std::string, std::vector<double>> maps_;
};

// Candidate selection for one same-class pair (A1,A2): the top_m B1 with the
// smallest distance to A1 among all other-class samples (ties broken by
// ascending id), and for each B1's class, the B2 closest to A2 within that
// class with B2 != B1.
struct PairCandidates {
  std::vector<std::string> b1s;           // ranked
  std::vector<std::string> b2_for_b1;     // same length
};

PairCandidates candidates_for_pair(const std::string& a1, const std::string& a2,
                                   const DatasetRegistry& registry, const MatchMapStore& maps,
                                   int top_m);

std::vector<Quadruplet> mine_quadruplets(const DatasetRegistry& registry,
                                         const MatchMapStore& maps, const MinerConfig& cfg);

// Posture-matched base partners for a novel sample: X1 ranked by map distance
// among samples appearing as a1 in d_g, X2 drawn uniformly from that a1's
// entries.
std::vector<std::pair<std::string, std::string>> find_posture_partners(
    const SaliencyMap& novel_map, const MatchMapStore& maps,
    const std::vector<Quadruplet>& d_g, int count, std::uint64_t seed);

// Manifest: one line per quadruplet, "a1,a2,b1,b2".
void write_manifest(const std::filesystem::path& path, const std::vector<Quadruplet>& quads);
std::vector<Quadruplet> read_manifest(const std::filesystem::path& path,
                                      const DatasetRegistry& registry);

}  // namespace fot
