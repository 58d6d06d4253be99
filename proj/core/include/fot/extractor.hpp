#pragma once

#include "fot/datamodel.hpp"
#include "fot/saliency.hpp"

namespace fot {

// Thresholded saliency; entries are exactly 0 or 1.
struct BinaryMask {
  Tensor bits;  // (1,H,W)
  int height() const { return bits.dim(1); }
  int width() const { return bits.dim(2); }
};

struct BoundingBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

enum class EmptyMaskPolicy { whole_image, error };

struct ExtractorConfig {
  double beta = 40.0;  // threshold on the 0..255 scale
  int output_h = 84;
  int output_w = 84;
  EmptyMaskPolicy empty_mask_policy = EmptyMaskPolicy::whole_image;
  bool pad_to_square = true;
};

// bit = 1 iff channel-mean pixel value (scaled to 0..255) >= beta.
BinaryMask threshold_saliency(const SaliencyMap& map, double beta);

// Broadcast multiply over channels: pixel kept where mask=1, zeroed where 0.
Tensor apply_mask(const Tensor& image_chw, const BinaryMask& mask);

// Tightest axis-aligned box containing all 1-bits.
BoundingBox mask_bounding_box(const BinaryMask& mask,
                              EmptyMaskPolicy policy = EmptyMaskPolicy::whole_image);

Tensor crop(const Tensor& image_chw, const BoundingBox& box);

// Optionally pads the crop to a square with black, then bilinear-resizes.
Tensor zoom_in(const Tensor& cropped_chw, int out_h, int out_w, bool pad_square);

// The full composition: threshold -> mask -> crop -> zoom. Output keeps the
// sample id and class, with stage set to "fg".
ImageSample extract_foreground(const ImageSample& sample, const SaliencyMap& map,
                               const ExtractorConfig& cfg);

// Background removal without crop/zoom, resized to the configured output
// size. This is the "RB" ablation stage; extract_foreground is "RB&RF".
ImageSample remove_background(const ImageSample& sample, const SaliencyMap& map,
                              const ExtractorConfig& cfg);

}  // namespace fot
