#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fot/autodiff.hpp"
#include "fot/common.hpp"

namespace fot {

enum class Arch { conv4, resnet18, resnet34 };

std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);

struct BackboneConfig {
  Arch arch = Arch::conv4;
  int in_channels = 3;
  int input_h = 84;
  int input_w = 84;
  int conv4_width = 64;   // channels of every conv4 block
  int resnet_width = 64;  // stem width; stages double it
};

namespace layers {

struct Conv {
  ad::Parameter w, b;
  int stride = 1, pad = 1;
  Conv() = default;
  Conv(const std::string& name, int c_in, int c_out, int k, int stride, int pad, Rng& rng);
  ad::Value fwd(ad::Tape& t, ad::Value x) const;
};

struct Deconv {
  ad::Parameter w, b;  // (C_in, C_out, k, k)
  int stride = 2, pad = 1;
  Deconv() = default;
  Deconv(const std::string& name, int c_in, int c_out, int k, int stride, int pad, Rng& rng);
  ad::Value fwd(ad::Tape& t, ad::Value x) const;
};

struct InstanceNorm {
  ad::Parameter gamma, beta;
  InstanceNorm() = default;
  InstanceNorm(const std::string& name, int channels);
  ad::Value fwd(ad::Tape& t, ad::Value x) const;
};

struct ResBlock {
  Conv conv1, conv2;
  InstanceNorm norm1, norm2;
  ResBlock() = default;
  ResBlock(const std::string& name, int channels, Rng& rng);
  ad::Value fwd(ad::Tape& t, ad::Value x) const;
};

}  // namespace layers

// F(theta). Maps (B,C,H,W) image batches to (B,d) feature batches.
// Deterministic in eval mode (no batch statistics anywhere).
class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const BackboneConfig& cfg, std::uint64_t seed);

  ad::Value forward(ad::Tape& t, ad::Value x) const;
  int feature_dim() const { return feature_dim_; }
  const BackboneConfig& config() const { return cfg_; }

  ad::ParamRefs params();
  ad::ParamRefs final_block_params();  // last conv4 block / last resnet stage
  void set_trainable(bool trainable);
  std::uint64_t checksum();

  void save(const std::filesystem::path& path, const std::string& config_hash = "") const;
  static FeatureExtractor load(const std::filesystem::path& path);

 private:
  struct ResnetBlock {
    layers::Conv conv1, conv2;
    layers::InstanceNorm norm1, norm2;
    bool project = false;
    layers::Conv proj;
    layers::InstanceNorm proj_norm;
  };

  BackboneConfig cfg_;
  int feature_dim_ = 0;
  // conv4
  std::vector<layers::Conv> convs_;
  std::vector<layers::InstanceNorm> norms_;
  // resnet
  layers::Conv stem_;
  layers::InstanceNorm stem_norm_;
  std::vector<ResnetBlock> blocks_;

  void build(std::uint64_t seed);
  friend struct NetIo;
};

// Batched feature extraction without gradients.
Tensor extract_features(const FeatureExtractor& f, const Tensor& batch_bchw);
// Single image (C,H,W) -> d-vector.
Tensor extract_features_single(const FeatureExtractor& f, const Tensor& chw);

// C(W). Cosine-similarity classifier: logits = s * cos(feature, W_c).
class CosineClassifier {
 public:
  CosineClassifier() = default;
  CosineClassifier(int num_classes, int feature_dim, double scale, bool learnable_scale,
                   std::uint64_t seed);

  ad::Value logits(ad::Tape& t, ad::Value features) const;
  int num_classes() const { return num_classes_; }
  int feature_dim() const { return feature_dim_; }
  double scale() const { return s_.value[0]; }

  ad::ParamRefs params();
  void set_trainable(bool trainable);
  std::uint64_t checksum();

  void save(const std::filesystem::path& path, const std::string& config_hash = "") const;
  static CosineClassifier load(const std::filesystem::path& path);

  static constexpr double kNormEps = 1e-8;

 private:
  int num_classes_ = 0;
  int feature_dim_ = 0;
  bool learnable_scale_ = false;
  ad::Parameter w_;  // (C,d)
  ad::Parameter s_;  // {1}
  friend struct NetIo;
};

// Softmax probabilities for a (B,d) feature batch, no gradients.
Tensor classify(const CosineClassifier& c, const Tensor& features);

// G(epsilon). Encoder of strided conv stages with built-in residual blocks,
// symmetric deconvolutional decoder, sigmoid output in [0,1]. Input is the
// channel concatenation of three images; spatial size must be a multiple of 8.
struct GeneratorConfig {
  int image_channels = 3;
  std::vector<int> widths = {64, 128, 256};
};

class Generator {
 public:
  Generator() = default;
  Generator(const GeneratorConfig& cfg, std::uint64_t seed);

  // a1, a2, b1: (B,C,H,W) each; returns (B,C,H,W)
  ad::Value forward(ad::Tape& t, ad::Value a1, ad::Value a2, ad::Value b1) const;
  const GeneratorConfig& config() const { return cfg_; }

  ad::ParamRefs params();
  void set_trainable(bool trainable);
  std::uint64_t checksum();

  void save(const std::filesystem::path& path, const std::string& config_hash = "") const;
  static Generator load(const std::filesystem::path& path);

 private:
  GeneratorConfig cfg_;
  std::vector<layers::Conv> enc_convs_;
  std::vector<layers::InstanceNorm> enc_norms_;
  std::vector<layers::ResBlock> enc_blocks_;
  std::vector<layers::Deconv> dec_deconvs_;
  std::vector<layers::InstanceNorm> dec_norms_;
  std::vector<layers::ResBlock> dec_blocks_;
  layers::Conv out_conv_;
  friend struct NetIo;
};

// pred = G([a1,a2,b1]) without gradients; inputs (C,H,W) or (B,C,H,W).
Tensor generate(const Generator& g, const Tensor& a1, const Tensor& a2, const Tensor& z1);

// Stacks (C,H,W) tensors into a (B,C,H,W) batch.
Tensor stack_batch(const std::vector<Tensor>& images);

}  // namespace fot
