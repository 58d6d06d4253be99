#include "fot/extractor.hpp"

#include <algorithm>

namespace fot {

BinaryMask threshold_saliency(const SaliencyMap& map, double beta) {
  map.validate();
  if (beta < 0.0 || beta > 255.0) fail("threshold beta must be in [0,255]");
  const int H = map.values.dim(1), W = map.values.dim(2);
  BinaryMask mask{Tensor({1, H, W})};
  for (std::int64_t i = 0; i < map.values.size(); ++i)
    mask.bits[i] = (map.values[i] * 255.0 >= beta) ? 1.0 : 0.0;
  return mask;
}

Tensor apply_mask(const Tensor& image_chw, const BinaryMask& mask) {
  if (image_chw.rank() != 3) fail("apply_mask expects a (C,H,W) image");
  const int C = image_chw.dim(0), H = image_chw.dim(1), W = image_chw.dim(2);
  if (mask.height() != H || mask.width() != W)
    fail("apply_mask: mask " + mask.bits.shape_str() + " does not match image " +
         image_chw.shape_str());
  Tensor out(image_chw.shape());
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    const double* src = image_chw.data() + c * plane;
    double* dst = out.data() + c * plane;
    const double* m = mask.bits.data();
    for (std::int64_t i = 0; i < plane; ++i) dst[i] = m[i] != 0.0 ? src[i] : 0.0;
  }
  return out;
}

BoundingBox mask_bounding_box(const BinaryMask& mask, EmptyMaskPolicy policy) {
  const int H = mask.height(), W = mask.width();
  int top = H, bottom = -1, left = W, right = -1;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask.bits.at(0, y, x) != 0.0) {
        top = std::min(top, y);
        bottom = std::max(bottom, y);
        left = std::min(left, x);
        right = std::max(right, x);
      }
  if (bottom < 0) {
    if (policy == EmptyMaskPolicy::error) fail("no salient region: mask is empty");
    return {0, 0, H, W};
  }
  return {top, left, bottom - top + 1, right - left + 1};
}

Tensor crop(const Tensor& image_chw, const BoundingBox& box) {
  const int C = image_chw.dim(0), H = image_chw.dim(1), W = image_chw.dim(2);
  if (box.height < 1 || box.width < 1) fail("crop: empty bounding box");
  if (box.top < 0 || box.left < 0 || box.top + box.height > H || box.left + box.width > W)
    fail("crop: box exceeds image bounds");
  Tensor out({C, box.height, box.width});
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < box.height; ++y)
      for (int x = 0; x < box.width; ++x)
        out.at(c, y, x) = image_chw.at(c, box.top + y, box.left + x);
  return out;
}

Tensor zoom_in(const Tensor& cropped_chw, int out_h, int out_w, bool pad_square) {
  if (cropped_chw.rank() != 3 || cropped_chw.dim(1) < 1 || cropped_chw.dim(2) < 1)
    fail("zoom_in: empty crop");
  if (pad_square) return resize_bilinear(pad_to_square(cropped_chw), out_h, out_w);
  return resize_bilinear(cropped_chw, out_h, out_w);
}

ImageSample extract_foreground(const ImageSample& sample, const SaliencyMap& map,
                               const ExtractorConfig& cfg) {
  if (cfg.output_h < 1 || cfg.output_w < 1) fail("extractor output size must be positive");
  const BinaryMask mask = threshold_saliency(map, cfg.beta);
  const Tensor masked = apply_mask(sample.pixels, mask);
  const BoundingBox box = mask_bounding_box(mask, cfg.empty_mask_policy);
  ImageSample out = sample;
  out.pixels = zoom_in(crop(masked, box), cfg.output_h, cfg.output_w, cfg.pad_to_square);
  out.stage = "fg";
  return out;
}

ImageSample remove_background(const ImageSample& sample, const SaliencyMap& map,
                              const ExtractorConfig& cfg) {
  const BinaryMask mask = threshold_saliency(map, cfg.beta);
  ImageSample out = sample;
  out.pixels = resize_bilinear(apply_mask(sample.pixels, mask), cfg.output_h, cfg.output_w);
  out.stage = "rb";
  return out;
}

}  // namespace fot
