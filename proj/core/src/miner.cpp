#include "fot/miner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace fot {

void Quadruplet::validate() const {
  if (class_a == class_b) fail("quadruplet: classes must differ");
  if (a1 == a2) fail("quadruplet: a1 == a2");
  if (b1 == b2) fail("quadruplet: b1 == b2");
}

double saliency_distance(const SaliencyMap& m1, const SaliencyMap& m2, int match_h, int match_w) {
  const SaliencyMap r1 = resize_map(m1, match_h, match_w);
  const SaliencyMap r2 = resize_map(m2, match_h, match_w);
  double s = 0.0;
  for (std::int64_t i = 0; i < r1.values.size(); ++i) {
    const double d = r1.values[i] - r2.values[i];
    s += d * d;
  }
  return std::sqrt(s);
}

void MatchMapStore::put(const std::string& id, const SaliencyMap& map) {
  maps_[id] = flatten(map);
}

std::vector<double> MatchMapStore::flatten(const SaliencyMap& map) const {
  return resize_map(map, h_, w_).values.vec();
}

double MatchMapStore::distance(const std::string& id1, const std::string& id2) const {
  auto it1 = maps_.find(id1);
  auto it2 = maps_.find(id2);
  if (it1 == maps_.end() || it2 == maps_.end()) fail("match map missing for " + id1 + " or " + id2);
  double s = 0.0;
  const auto& v1 = it1->second;
  const auto& v2 = it2->second;
  for (std::size_t i = 0; i < v1.size(); ++i) {
    const double d = v1[i] - v2[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double MatchMapStore::distance_to(const std::vector<double>& flat, const std::string& id) const {
  auto it = maps_.find(id);
  if (it == maps_.end()) fail("match map missing for " + id);
  if (flat.size() != it->second.size()) fail("match map size mismatch");
  double s = 0.0;
  const auto& v = it->second;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = flat[i] - v[i];
    s += d * d;
  }
  return std::sqrt(s);
}

namespace {
// smallest-distance first, ties by ascending id
struct Ranked {
  double dist;
  std::string id;
  bool operator<(const Ranked& o) const {
    if (dist != o.dist) return dist < o.dist;
    return id < o.id;
  }
};
}  // namespace

PairCandidates candidates_for_pair(const std::string& a1, const std::string& a2,
                                   const DatasetRegistry& registry, const MatchMapStore& maps,
                                   int top_m) {
  const int class_a = registry.record(a1).class_id;
  std::vector<Ranked> ranked;
  for (const auto& rec : registry.records()) {
    if (rec.role != SplitRole::base || rec.class_id == class_a) continue;
    ranked.push_back({maps.distance(a1, rec.id), rec.id});
  }
  const int m = std::min<int>(top_m, static_cast<int>(ranked.size()));
  std::partial_sort(ranked.begin(), ranked.begin() + m, ranked.end());

  PairCandidates out;
  for (int i = 0; i < m; ++i) {
    const std::string& b1 = ranked[static_cast<std::size_t>(i)].id;
    const int class_b = registry.record(b1).class_id;
    Ranked best{std::numeric_limits<double>::infinity(), ""};
    for (const auto& id : registry.ids_of_class(class_b)) {
      if (id == b1) continue;
      Ranked r{maps.distance(a2, id), id};
      if (r < best) best = r;
    }
    if (best.id.empty()) continue;  // b1's class has a single sample
    out.b1s.push_back(b1);
    out.b2_for_b1.push_back(best.id);
  }
  return out;
}

std::vector<Quadruplet> mine_quadruplets(const DatasetRegistry& registry,
                                         const MatchMapStore& maps, const MinerConfig& cfg) {
  if (cfg.top_m < 1) fail("miner: top_m must be >= 1");
  if (cfg.target_count < 1) fail("miner: target_count must be >= 1");
  const std::vector<int> base_classes = registry.class_ids_with_role(SplitRole::base);
  int usable = 0;
  for (int cid : base_classes)
    if (registry.ids_of_class(cid).size() >= 2) ++usable;
  if (usable < 2) fail("miner: need at least 2 base classes with >= 2 samples each");

  // sample (A1,A2) ordered pairs per class without replacement
  Rng rng(cfg.seed);
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int cid : base_classes) {
    const std::vector<std::string> ids = registry.ids_of_class(cid);
    const std::size_t n = ids.size();
    if (n < 2) continue;  // single-sample classes contribute no pairs
    const std::uint64_t total = static_cast<std::uint64_t>(n) * (n - 1);
    if (total <= static_cast<std::uint64_t>(cfg.pairs_per_class)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) pairs.emplace_back(ids[i], ids[j]);
    } else {
      std::set<std::uint64_t> seen;
      while (seen.size() < static_cast<std::size_t>(cfg.pairs_per_class)) {
        const std::uint64_t i = rng.next_u64(n);
        std::uint64_t j = rng.next_u64(n - 1);
        if (j >= i) ++j;
        if (seen.insert(i * n + j).second)
          pairs.emplace_back(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
      }
    }
  }

  // candidate search parallelizes over pairs; output order stays the
  // deterministic pair order
  std::vector<PairCandidates> cands(pairs.size());
  parallel_for(0, static_cast<std::int64_t>(pairs.size()), [&](std::int64_t i) {
    cands[static_cast<std::size_t>(i)] =
        candidates_for_pair(pairs[static_cast<std::size_t>(i)].first,
                            pairs[static_cast<std::size_t>(i)].second, registry, maps, cfg.top_m);
  });

  std::vector<Quadruplet> quads;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& [a1, a2] = pairs[i];
    const int class_a = registry.record(a1).class_id;
    const PairCandidates& pc = cands[i];
    for (std::size_t k = 0; k < pc.b1s.size(); ++k) {
      Quadruplet q;
      q.a1 = a1;
      q.a2 = a2;
      q.b1 = pc.b1s[k];
      q.b2 = pc.b2_for_b1[k];
      q.class_a = class_a;
      q.class_b = registry.record(q.b1).class_id;
      q.validate();
      quads.push_back(std::move(q));
    }
  }

  if (static_cast<int>(quads.size()) > cfg.target_count) {
    // uniform subsample, deterministic under seed
    std::vector<std::size_t> idx(quads.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(cfg.target_count));
    std::sort(idx.begin(), idx.end());
    std::vector<Quadruplet> kept;
    kept.reserve(idx.size());
    for (std::size_t i : idx) kept.push_back(std::move(quads[i]));
    quads = std::move(kept);
  } else if (static_cast<int>(quads.size()) < cfg.target_count) {
    log_warn("miner: produced " + std::to_string(quads.size()) + " quadruplets, below target " +
             std::to_string(cfg.target_count));
  }
  return quads;
}

std::vector<std::pair<std::string, std::string>> find_posture_partners(
    const SaliencyMap& novel_map, const MatchMapStore& maps,
    const std::vector<Quadruplet>& d_g, int count, std::uint64_t seed) {
  if (d_g.empty()) fail("mine D_g first: quadruplet list is empty");
  if (count < 0) fail("find_posture_partners: count must be >= 0");

  std::map<std::string, std::vector<const Quadruplet*>> by_a1;
  for (const auto& q : d_g) by_a1[q.a1].push_back(&q);

  const std::vector<double> flat = maps.flatten(novel_map);
  std::vector<Ranked> ranked;
  ranked.reserve(by_a1.size());
  for (const auto& [a1, entries] : by_a1) ranked.push_back({maps.distance_to(flat, a1), a1});
  std::sort(ranked.begin(), ranked.end());

  Rng rng(seed);
  std::vector<std::pair<std::string, std::string>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::string& x1 = ranked[static_cast<std::size_t>(i) % ranked.size()].id;
    const auto& entries = by_a1.at(x1);
    const Quadruplet* q = entries[static_cast<std::size_t>(rng.next_u64(entries.size()))];
    out.emplace_back(q->a1, q->a2);
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<Quadruplet>& quads) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail("cannot write manifest: " + path.string());
  for (const auto& q : quads) out << q.a1 << "," << q.a2 << "," << q.b1 << "," << q.b2 << "\n";
}

std::vector<Quadruplet> read_manifest(const std::filesystem::path& path,
                                      const DatasetRegistry& registry) {
  std::ifstream in(path);
  if (!in) fail("cannot open manifest: " + path.string());
  std::vector<Quadruplet> quads;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (int i = 0; i < 3; ++i) {
      const auto comma = line.find(',', start);
      if (comma == std::string::npos)
        fail("manifest " + path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
      parts.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    parts.push_back(line.substr(start));
    Quadruplet q;
    q.a1 = parts[0];
    q.a2 = parts[1];
    q.b1 = parts[2];
    q.b2 = parts[3];
    q.class_a = registry.record(q.a1).class_id;
    q.class_b = registry.record(q.b1).class_id;
    q.validate();
    quads.push_back(std::move(q));
  }
  return quads;
}

}  // namespace fot
