#include "fot/saliency.hpp"

#include "fot/image_io.hpp"

namespace fot {

namespace fs = std::filesystem;

void SaliencyMap::validate() const {
  if (values.rank() != 3 || values.dim(0) != 1)
    fail("saliency map must be (1,H,W), got " + values.shape_str());
  if (values.dim(1) < 1 || values.dim(2) < 1) fail("saliency map has empty spatial extent");
  if (!values.all_finite()) fail("saliency map contains non-finite values");
  if (values.min() < 0.0 || values.max() > 1.0)
    fail("saliency map values outside [0,1]");
}

namespace {
// sample ids are "<class_name>/<stem>"; map them to cache paths
fs::path cache_path(const fs::path& dir, const std::string& sample_id) {
  return dir / (sample_id + ".png");
}
}  // namespace

PrecomputedBackend::PrecomputedBackend(fs::path dir) : dir_(std::move(dir)) {
  if (!fs::is_directory(dir_)) fail("saliency directory not found: " + dir_.string());
}

SaliencyMap PrecomputedBackend::compute(const ImageSample& sample) {
  const fs::path p = cache_path(dir_, sample.id);
  if (!fs::exists(p))
    fail("no precomputed saliency map for sample '" + sample.id + "' (expected " + p.string() +
         "); precompute maps with the external SOD model first");
  SaliencyMap map{load_gray(p), sample.id};
  if (map.values.dim(1) != sample.pixels.dim(1) || map.values.dim(2) != sample.pixels.dim(2)) {
    log_warn("saliency map resolution differs from image for '" + sample.id + "', resizing");
    map = resize_map(map, sample.pixels.dim(1), sample.pixels.dim(2));
  }
  map.validate();
  return map;
}

SaliencyMap ConstantBackend::compute(const ImageSample& sample) {
  SaliencyMap map{Tensor({1, sample.pixels.dim(1), sample.pixels.dim(2)}, value_), sample.id};
  map.validate();
  return map;
}

std::optional<SaliencyMap> SaliencyCache::get(const ImageSample& sample) const {
  const fs::path p = cache_path(dir_, sample.id);
  if (!fs::exists(p)) return std::nullopt;
  SaliencyMap map{load_gray(p), sample.id};
  if (map.values.dim(1) != sample.pixels.dim(1) || map.values.dim(2) != sample.pixels.dim(2)) {
    log_warn("cached saliency resolution differs from image for '" + sample.id + "', resizing");
    map = resize_map(map, sample.pixels.dim(1), sample.pixels.dim(2));
  }
  return map;
}

void SaliencyCache::put(const SaliencyMap& map, const std::string& class_name,
                        const std::string& file_stem) const {
  save_gray_atomic(dir_ / class_name / (file_stem + ".png"), map.values);
}

SaliencyMap compute_saliency(const ImageSample& sample, SaliencyBackend* backend,
                             const SaliencyCache* cache) {
  if (cache) {
    if (auto hit = cache->get(sample)) {
      hit->validate();
      return *hit;
    }
  }
  if (!backend) {
    fail("saliency backend unavailable and cache miss for sample '" + sample.id +
         "'; precompute maps into the cache directory first");
  }
  SaliencyMap map = backend->compute(sample);
  map.validate();
  if (cache) {
    const auto slash = sample.id.find('/');
    const std::string cls = slash == std::string::npos ? "" : sample.id.substr(0, slash);
    const std::string stem = slash == std::string::npos ? sample.id : sample.id.substr(slash + 1);
    cache->put(map, cls, stem);
  }
  return map;
}

SaliencyMap resize_map(const SaliencyMap& map, int target_h, int target_w) {
  if (target_h < 1 || target_w < 1) fail("resize_map: target size must be positive");
  SaliencyMap out{resize_bilinear(map.values, target_h, target_w), map.source_id};
  out.values.clamp_(0.0, 1.0);
  return out;
}

}  // namespace fot
