#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "fot/datamodel.hpp"
#include "fot/tensor.hpp"

namespace fot {

// One-channel relevance map, same spatial size as its source image,
// values in [0,1].
struct SaliencyMap {
  Tensor values;  // (1,H,W)
  std::string source_id;

  void validate() const;
};

// A saliency producer. The salient-object-detection network itself is an
// external pretrained model; the backends here either read its precomputed
// output or stand in for it in tests and synthetic runs.
class SaliencyBackend {
 public:
  virtual ~SaliencyBackend() = default;
  virtual SaliencyMap compute(const ImageSample& sample) = 0;
  virtual std::string name() const = 0;
};

// Reads 8-bit grayscale maps from a directory mirroring the dataset layout:
// <dir>/<class_name>/<image_stem>.png
class PrecomputedBackend : public SaliencyBackend {
 public:
  explicit PrecomputedBackend(std::filesystem::path dir);
  SaliencyMap compute(const ImageSample& sample) override;
  std::string name() const override { return "precomputed"; }

 private:
  std::filesystem::path dir_;
};

// Constant-valued stub.
class ConstantBackend : public SaliencyBackend {
 public:
  explicit ConstantBackend(double value) : value_(value) {}
  SaliencyMap compute(const ImageSample& sample) override;
  std::string name() const override { return "constant"; }

 private:
  double value_;
};

// On-disk cache in the same layout as PrecomputedBackend reads. Writes are
// atomic (temp file + rename); reads resize to the source image with a
// warning when resolutions differ.
class SaliencyCache {
 public:
  explicit SaliencyCache(std::filesystem::path dir) : dir_(std::move(dir)) {}
  std::optional<SaliencyMap> get(const ImageSample& sample) const;
  void put(const SaliencyMap& map, const std::string& class_name,
           const std::string& file_stem) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

// Cache-through lookup: serve from cache when present, otherwise invoke the
// backend and populate the cache. Either `backend` or `cache` may be null,
// but not both.
SaliencyMap compute_saliency(const ImageSample& sample, SaliencyBackend* backend,
                             const SaliencyCache* cache);

// Bilinear resize with clamping to [0,1].
SaliencyMap resize_map(const SaliencyMap& map, int target_h, int target_w);

}  // namespace fot
