#include "fot/networks.hpp"

#include <cmath>
#include <cstring>

#include <nlohmann/json.hpp>

#include "fot/checkpoint.hpp"

namespace fot {

using ad::Parameter;
using ad::Tape;
using ad::Value;

std::string to_string(Arch a) {
  switch (a) {
    case Arch::conv4: return "conv4";
    case Arch::resnet18: return "resnet18";
    case Arch::resnet34: return "resnet34";
  }
  return "?";
}

Arch arch_from_string(const std::string& s) {
  if (s == "conv4") return Arch::conv4;
  if (s == "resnet18") return Arch::resnet18;
  if (s == "resnet34") return Arch::resnet34;
  fail("unknown architecture '" + s + "'");
}

namespace layers {

namespace {
Tensor he_init(const std::vector<int>& shape, int fan_in, Rng& rng) {
  Tensor t(shape);
  const double std = std::sqrt(2.0 / fan_in);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, std);
  return t;
}
}  // namespace

Conv::Conv(const std::string& name, int c_in, int c_out, int k, int stride_, int pad_, Rng& rng)
    : w(name + ".w", he_init({c_out, c_in, k, k}, c_in * k * k, rng)),
      b(name + ".b", Tensor({c_out})),
      stride(stride_),
      pad(pad_) {}

Value Conv::fwd(Tape& t, Value x) const {
  auto* self = const_cast<Conv*>(this);
  return t.conv2d(x, t.param(self->w), t.param(self->b), stride, pad);
}

Deconv::Deconv(const std::string& name, int c_in, int c_out, int k, int stride_, int pad_,
               Rng& rng)
    : w(name + ".w", he_init({c_in, c_out, k, k}, c_in * k * k, rng)),
      b(name + ".b", Tensor({c_out})),
      stride(stride_),
      pad(pad_) {}

Value Deconv::fwd(Tape& t, Value x) const {
  auto* self = const_cast<Deconv*>(this);
  return t.conv_transpose2d(x, t.param(self->w), t.param(self->b), stride, pad);
}

InstanceNorm::InstanceNorm(const std::string& name, int channels)
    : gamma(name + ".gamma", Tensor({channels}, 1.0)), beta(name + ".beta", Tensor({channels})) {}

Value InstanceNorm::fwd(Tape& t, Value x) const {
  auto* self = const_cast<InstanceNorm*>(this);
  return t.instance_norm(x, t.param(self->gamma), t.param(self->beta));
}

ResBlock::ResBlock(const std::string& name, int channels, Rng& rng)
    : conv1(name + ".conv1", channels, channels, 3, 1, 1, rng),
      conv2(name + ".conv2", channels, channels, 3, 1, 1, rng),
      norm1(name + ".norm1", channels),
      norm2(name + ".norm2", channels) {}

Value ResBlock::fwd(Tape& t, Value x) const {
  Value h = t.relu(norm1.fwd(t, conv1.fwd(t, x)));
  h = norm2.fwd(t, conv2.fwd(t, h));
  return t.relu(t.add(x, h));
}

}  // namespace layers

// ---- FeatureExtractor ------------------------------------------------------

FeatureExtractor::FeatureExtractor(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  build(seed);
}

void FeatureExtractor::build(std::uint64_t seed) {
  Rng rng(seed);
  if (cfg_.arch == Arch::conv4) {
    int h = cfg_.input_h, w = cfg_.input_w;
    int c_in = cfg_.in_channels;
    for (int i = 0; i < 4; ++i) {
      const std::string name = "block" + std::to_string(i);
      convs_.emplace_back(name + ".conv", c_in, cfg_.conv4_width, 3, 1, 1, rng);
      norms_.emplace_back(name + ".norm", cfg_.conv4_width);
      c_in = cfg_.conv4_width;
      h /= 2;
      w /= 2;
      if (h < 1 || w < 1) fail("conv4: input size too small for 4 pooling stages");
    }
    feature_dim_ = cfg_.conv4_width * h * w;
    return;
  }

  // resnet18 / resnet34
  const std::vector<int> counts =
      cfg_.arch == Arch::resnet18 ? std::vector<int>{2, 2, 2, 2} : std::vector<int>{3, 4, 6, 3};
  stem_ = layers::Conv("stem.conv", cfg_.in_channels, cfg_.resnet_width, 7, 2, 3, rng);
  stem_norm_ = layers::InstanceNorm("stem.norm", cfg_.resnet_width);
  int c_in = cfg_.resnet_width;
  for (int stage = 0; stage < 4; ++stage) {
    const int c_out = cfg_.resnet_width << stage;
    for (int i = 0; i < counts[static_cast<std::size_t>(stage)]; ++i) {
      const std::string name = "stage" + std::to_string(stage) + ".block" + std::to_string(i);
      ResnetBlock blk;
      const int stride = (stage > 0 && i == 0) ? 2 : 1;
      blk.conv1 = layers::Conv(name + ".conv1", c_in, c_out, 3, stride, 1, rng);
      blk.norm1 = layers::InstanceNorm(name + ".norm1", c_out);
      blk.conv2 = layers::Conv(name + ".conv2", c_out, c_out, 3, 1, 1, rng);
      blk.norm2 = layers::InstanceNorm(name + ".norm2", c_out);
      if (stride != 1 || c_in != c_out) {
        blk.project = true;
        blk.proj = layers::Conv(name + ".proj", c_in, c_out, 1, stride, 0, rng);
        blk.proj_norm = layers::InstanceNorm(name + ".proj_norm", c_out);
      }
      blocks_.push_back(std::move(blk));
      c_in = c_out;
    }
  }
  feature_dim_ = c_in;
}

Value FeatureExtractor::forward(Tape& t, Value x) const {
  const Tensor& tx = t.val(x);
  if (tx.rank() != 4 || tx.dim(1) != cfg_.in_channels || tx.dim(2) != cfg_.input_h ||
      tx.dim(3) != cfg_.input_w)
    fail("feature extractor: expected (B," + std::to_string(cfg_.in_channels) + "," +
         std::to_string(cfg_.input_h) + "," + std::to_string(cfg_.input_w) + "), got " +
         tx.shape_str());
  if (cfg_.arch == Arch::conv4) {
    Value h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i].fwd(t, h);
      h = norms_[i].fwd(t, h);
      h = t.relu(h);
      h = t.maxpool2(h);
    }
    return t.flatten2(h);
  }
  Value h = t.maxpool2(t.relu(stem_norm_.fwd(t, stem_.fwd(t, x))));
  for (const auto& blk : blocks_) {
    Value main = t.relu(blk.norm1.fwd(t, blk.conv1.fwd(t, h)));
    main = blk.norm2.fwd(t, blk.conv2.fwd(t, main));
    Value skip = blk.project ? blk.proj_norm.fwd(t, blk.proj.fwd(t, h)) : h;
    h = t.relu(t.add(skip, main));
  }
  return t.global_avg_pool(h);
}

ad::ParamRefs FeatureExtractor::params() {
  ad::ParamRefs out;
  for (auto& c : convs_) {
    out.push_back(&c.w);
    out.push_back(&c.b);
  }
  for (auto& n : norms_) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  }
  if (cfg_.arch != Arch::conv4) {
    out.push_back(&stem_.w);
    out.push_back(&stem_.b);
    out.push_back(&stem_norm_.gamma);
    out.push_back(&stem_norm_.beta);
    for (auto& blk : blocks_) {
      out.push_back(&blk.conv1.w);
      out.push_back(&blk.conv1.b);
      out.push_back(&blk.norm1.gamma);
      out.push_back(&blk.norm1.beta);
      out.push_back(&blk.conv2.w);
      out.push_back(&blk.conv2.b);
      out.push_back(&blk.norm2.gamma);
      out.push_back(&blk.norm2.beta);
      if (blk.project) {
        out.push_back(&blk.proj.w);
        out.push_back(&blk.proj.b);
        out.push_back(&blk.proj_norm.gamma);
        out.push_back(&blk.proj_norm.beta);
      }
    }
  }
  return out;
}

ad::ParamRefs FeatureExtractor::final_block_params() {
  ad::ParamRefs out;
  if (cfg_.arch == Arch::conv4) {
    out.push_back(&convs_.back().w);
    out.push_back(&convs_.back().b);
    out.push_back(&norms_.back().gamma);
    out.push_back(&norms_.back().beta);
    return out;
  }
  const int last_stage_blocks = cfg_.arch == Arch::resnet18 ? 2 : 3;
  for (std::size_t i = blocks_.size() - static_cast<std::size_t>(last_stage_blocks);
       i < blocks_.size(); ++i) {
    auto& blk = blocks_[i];
    out.push_back(&blk.conv1.w);
    out.push_back(&blk.conv1.b);
    out.push_back(&blk.norm1.gamma);
    out.push_back(&blk.norm1.beta);
    out.push_back(&blk.conv2.w);
    out.push_back(&blk.conv2.b);
    out.push_back(&blk.norm2.gamma);
    out.push_back(&blk.norm2.beta);
    if (blk.project) {
      out.push_back(&blk.proj.w);
      out.push_back(&blk.proj.b);
      out.push_back(&blk.proj_norm.gamma);
      out.push_back(&blk.proj_norm.beta);
    }
  }
  return out;
}

void FeatureExtractor::set_trainable(bool trainable) {
  for (Parameter* p : params()) p->requires_grad = trainable;
}

std::uint64_t FeatureExtractor::checksum() { return ad::params_checksum(params()); }

Tensor extract_features(const FeatureExtractor& f, const Tensor& batch_bchw) {
  // forward-only tape: no backward call, so no gradient state is touched
  Tape t;
  Tensor out = t.val(f.forward(t, t.input(batch_bchw)));
  if (!out.all_finite()) fail("feature extractor produced non-finite values");
  return out;
}

Tensor extract_features_single(const FeatureExtractor& f, const Tensor& chw) {
  Tensor batch = stack_batch({chw});
  Tensor features = extract_features(f, batch);
  return features.reshaped({features.dim(1)});
}

// ---- CosineClassifier ------------------------------------------------------

CosineClassifier::CosineClassifier(int num_classes, int feature_dim, double scale,
                                   bool learnable_scale, std::uint64_t seed)
    : num_classes_(num_classes), feature_dim_(feature_dim), learnable_scale_(learnable_scale) {
  if (num_classes < 1 || feature_dim < 1) fail("classifier: invalid dimensions");
  Rng rng(seed);
  Tensor w({num_classes, feature_dim});
  const double std = 1.0 / std::sqrt(feature_dim);
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
  w_ = Parameter("classifier.w", std::move(w));
  s_ = Parameter("classifier.s", Tensor({1}, scale));
  s_.requires_grad = learnable_scale_;
}

Value CosineClassifier::logits(Tape& t, Value features) const {
  const Tensor& tf = t.val(features);
  if (tf.rank() != 2 || tf.dim(1) != feature_dim_)
    fail("classifier: feature dimension mismatch, expected (B," + std::to_string(feature_dim_) +
         "), got " + tf.shape_str());
  auto* self = const_cast<CosineClassifier*>(this);
  Value xn = t.l2normalize_rows(features, kNormEps);
  Value wn = t.l2normalize_rows(t.param(self->w_), kNormEps);
  return t.scale_by(t.matmul_nt(xn, wn), t.param(self->s_));
}

ad::ParamRefs CosineClassifier::params() {
  ad::ParamRefs out{&w_};
  if (learnable_scale_) out.push_back(&s_);
  return out;
}

void CosineClassifier::set_trainable(bool trainable) {
  w_.requires_grad = trainable;
  s_.requires_grad = trainable && learnable_scale_;
}

std::uint64_t CosineClassifier::checksum() {
  ad::ParamRefs refs{&w_, &s_};
  return ad::params_checksum(refs);
}

Tensor classify(const CosineClassifier& c, const Tensor& features) {
  const bool single = features.rank() == 1;
  Tensor batch = single ? features.reshaped({1, static_cast<int>(features.size())}) : features;
  Tape t;
  Tensor probs = t.val(t.softmax(c.logits(t, t.input(batch))));
  if (single) return probs.reshaped({probs.dim(1)});
  return probs;
}

// ---- Generator ---------------------------------------------------------------

Generator::Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg_.widths.size() != 3) fail("generator: expected 3 encoder stage widths");
  Rng rng(seed);
  int c_in = 3 * cfg_.image_channels;
  for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
    const int c_out = cfg_.widths[i];
    const std::string name = "enc" + std::to_string(i);
    enc_convs_.emplace_back(name + ".conv", c_in, c_out, 3, 2, 1, rng);
    enc_norms_.emplace_back(name + ".norm", c_out);
    enc_blocks_.emplace_back(name + ".res", c_out, rng);
    c_in = c_out;
  }
  for (std::size_t i = cfg_.widths.size(); i-- > 0;) {
    const int c_out = i == 0 ? cfg_.widths[0] : cfg_.widths[i - 1];
    const std::string name = "dec" + std::to_string(cfg_.widths.size() - 1 - i);
    dec_deconvs_.emplace_back(name + ".deconv", c_in, c_out, 4, 2, 1, rng);
    dec_norms_.emplace_back(name + ".norm", c_out);
    dec_blocks_.emplace_back(name + ".res", c_out, rng);
    c_in = c_out;
  }
  out_conv_ = layers::Conv("out.conv", c_in, cfg_.image_channels, 3, 1, 1, rng);
}

Value Generator::forward(Tape& t, Value a1, Value a2, Value b1) const {
  const Tensor& ta = t.val(a1);
  if (!t.val(a2).same_shape(ta) || !t.val(b1).same_shape(ta))
    fail("generator: the three input images must have the same shape");
  if (ta.rank() != 4 || ta.dim(1) != cfg_.image_channels)
    fail("generator: expected (B," + std::to_string(cfg_.image_channels) + ",H,W), got " +
         ta.shape_str());
  // three stride-2 stages need multiples of 8; pad internally, crop back
  const int H = ta.dim(2), W = ta.dim(3);
  const int pad_b = (8 - H % 8) % 8;
  const int pad_r = (8 - W % 8) % 8;
  Value h = t.pad_spatial(t.concat_channels({a1, a2, b1}), pad_b, pad_r);
  for (std::size_t i = 0; i < enc_convs_.size(); ++i) {
    h = t.relu(enc_norms_[i].fwd(t, enc_convs_[i].fwd(t, h)));
    h = enc_blocks_[i].fwd(t, h);
  }
  for (std::size_t i = 0; i < dec_deconvs_.size(); ++i) {
    h = t.relu(dec_norms_[i].fwd(t, dec_deconvs_[i].fwd(t, h)));
    h = dec_blocks_[i].fwd(t, h);
  }
  return t.sigmoid(out_conv_.fwd(t, h));
}

ad::ParamRefs Generator::params() {
  ad::ParamRefs out;
  auto add_conv = [&out](layers::Conv& c) {
    out.push_back(&c.w);
    out.push_back(&c.b);
  };
  auto add_norm = [&out](layers::InstanceNorm& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  };
  auto add_block = [&](layers::ResBlock& r) {
    add_conv(r.conv1);
    add_norm(r.norm1);
    add_conv(r.conv2);
    add_norm(r.norm2);
  };
  for (std::size_t i = 0; i < enc_convs_.size(); ++i) {
    add_conv(enc_convs_[i]);
    add_norm(enc_norms_[i]);
    add_block(enc_blocks_[i]);
  }
  for (std::size_t i = 0; i < dec_deconvs_.size(); ++i) {
    auto& d = dec_deconvs_[i];
    out.push_back(&d.w);
    out.push_back(&d.b);
    add_norm(dec_norms_[i]);
    add_block(dec_blocks_[i]);
  }
  add_conv(out_conv_);
  return out;
}

void Generator::set_trainable(bool trainable) {
  for (Parameter* p : params()) p->requires_grad = trainable;
}

std::uint64_t Generator::checksum() { return ad::params_checksum(params()); }

Tensor generate(const Generator& g, const Tensor& a1, const Tensor& a2, const Tensor& z1) {
  const bool single = a1.rank() == 3;
  Tensor ba1 = single ? stack_batch({a1}) : a1;
  Tensor ba2 = single ? stack_batch({a2}) : a2;
  Tensor bz1 = single ? stack_batch({z1}) : z1;
  Tape t;
  Tensor out = t.val(g.forward(t, t.input(ba1), t.input(ba2), t.input(bz1)));
  if (single) return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
  return out;
}

Tensor stack_batch(const std::vector<Tensor>& images) {
  if (images.empty()) fail("stack_batch: empty list");
  const Tensor& first = images[0];
  if (first.rank() != 3) fail("stack_batch expects (C,H,W) tensors");
  Tensor out({static_cast<int>(images.size()), first.dim(0), first.dim(1), first.dim(2)});
  const std::int64_t n = first.size();
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (!images[b].same_shape(first)) fail("stack_batch: inconsistent shapes");
    std::memcpy(out.data() + static_cast<std::int64_t>(b) * n, images[b].data(),
                static_cast<std::size_t>(n) * sizeof(double));
  }
  return out;
}

// ---- checkpoints -------------------------------------------------------------

namespace {
std::vector<std::pair<std::string, const Tensor*>> named_tensors(ad::ParamRefs refs) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(refs.size());
  for (Parameter* p : refs) out.emplace_back(p->name, &p->value);
  return out;
}

void fill_from(const Checkpoint& ck, ad::ParamRefs refs) {
  for (Parameter* p : refs) {
    auto it = ck.tensors.find(p->name);
    if (it == ck.tensors.end()) fail("checkpoint missing tensor '" + p->name + "'");
    if (it->second.shape() != p->value.shape())
      fail("checkpoint tensor '" + p->name + "' has shape " + it->second.shape_str() +
           ", expected " + p->value.shape_str());
    p->value = it->second;
  }
}
}  // namespace

void FeatureExtractor::save(const std::filesystem::path& path,
                            const std::string& config_hash) const {
  nlohmann::json meta;
  meta["arch"] = to_string(cfg_.arch);
  meta["in_channels"] = cfg_.in_channels;
  meta["input_h"] = cfg_.input_h;
  meta["input_w"] = cfg_.input_w;
  meta["conv4_width"] = cfg_.conv4_width;
  meta["resnet_width"] = cfg_.resnet_width;
  auto& self = const_cast<FeatureExtractor&>(*this);
  save_checkpoint(path, "feature_extractor", meta.dump(), config_hash,
                  named_tensors(self.params()));
}

FeatureExtractor FeatureExtractor::load(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "feature_extractor")
    fail("checkpoint kind mismatch: expected feature_extractor, got " + ck.kind);
  const auto meta = nlohmann::json::parse(ck.meta_json);
  BackboneConfig cfg;
  cfg.arch = arch_from_string(meta.at("arch").get<std::string>());
  cfg.in_channels = meta.at("in_channels").get<int>();
  cfg.input_h = meta.at("input_h").get<int>();
  cfg.input_w = meta.at("input_w").get<int>();
  cfg.conv4_width = meta.at("conv4_width").get<int>();
  cfg.resnet_width = meta.at("resnet_width").get<int>();
  FeatureExtractor f(cfg, 0);
  fill_from(ck, f.params());
  return f;
}

void CosineClassifier::save(const std::filesystem::path& path,
                            const std::string& config_hash) const {
  nlohmann::json meta;
  meta["num_classes"] = num_classes_;
  meta["feature_dim"] = feature_dim_;
  meta["learnable_scale"] = learnable_scale_;
  auto& self = const_cast<CosineClassifier&>(*this);
  ad::ParamRefs refs{&self.w_, &self.s_};
  save_checkpoint(path, "cosine_classifier", meta.dump(), config_hash, named_tensors(refs));
}

CosineClassifier CosineClassifier::load(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "cosine_classifier")
    fail("checkpoint kind mismatch: expected cosine_classifier, got " + ck.kind);
  const auto meta = nlohmann::json::parse(ck.meta_json);
  CosineClassifier c(meta.at("num_classes").get<int>(), meta.at("feature_dim").get<int>(), 2.0,
                     meta.at("learnable_scale").get<bool>(), 0);
  ad::ParamRefs refs{&c.w_, &c.s_};
  fill_from(ck, refs);
  return c;
}

void Generator::save(const std::filesystem::path& path, const std::string& config_hash) const {
  nlohmann::json meta;
  meta["image_channels"] = cfg_.image_channels;
  meta["widths"] = cfg_.widths;
  auto& self = const_cast<Generator&>(*this);
  save_checkpoint(path, "generator", meta.dump(), config_hash, named_tensors(self.params()));
}

Generator Generator::load(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != "generator") fail("checkpoint kind mismatch: expected generator, got " + ck.kind);
  const auto meta = nlohmann::json::parse(ck.meta_json);
  GeneratorConfig cfg;
  cfg.image_channels = meta.at("image_channels").get<int>();
  cfg.widths = meta.at("widths").get<std::vector<int>>();
  Generator g(cfg, 0);
  fill_from(ck, g.params());
  return g;
}

}  // namespace fot
