#include "fot/training.hpp"

#include <algorithm>
#include <cmath>

namespace fot {

using ad::Adam;
using ad::Parameter;
using ad::Tape;
using ad::Value;

std::string to_string(EntropySign s) {
  return s == EntropySign::minimize_entropy ? "minimize_entropy" : "paper_literal";
}

EntropySign entropy_sign_from_string(const std::string& s) {
  if (s == "minimize_entropy") return EntropySign::minimize_entropy;
  if (s == "paper_literal") return EntropySign::paper_literal;
  fail("unknown entropy_sign '" + s + "'");
}

int FotConfig::resolve_k(int k_shot) const {
  int k = k_generated >= 0 ? k_generated : (k_shot == 1 ? 3 : 5);
  const int bound = k_shot == 1 ? 3 : 5;
  if (k > bound)
    log_warn("k_generated=" + std::to_string(k) + " exceeds the recommended bound " +
             std::to_string(bound) + " for " + std::to_string(k_shot) + "-shot tasks");
  return k;
}

void FotConfig::validate() const {
  if (original_only_iters > finetune_iters)
    fail("config: original_only_iters exceeds finetune_iters");
  if (lambda_mse < 0.0) fail("config: lambda_mse must be >= 0");
  if (finetune_iters < 0 || gen_epochs < 0 || base_epochs < 0) fail("config: negative iteration count");
  if (gen_batch < 1 || base_batch < 1) fail("config: batch size must be >= 1");
}

// ---- losses -----------------------------------------------------------------

namespace {
constexpr double kLogEps = 1e-12;

// restores requires_grad flags on destruction
class FreezeGuard {
 public:
  explicit FreezeGuard(ad::ParamRefs refs) : refs_(std::move(refs)) {
    saved_.reserve(refs_.size());
    for (Parameter* p : refs_) {
      saved_.push_back(p->requires_grad);
      p->requires_grad = false;
    }
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < refs_.size(); ++i) refs_[i]->requires_grad = saved_[i];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ad::ParamRefs refs_;
  std::vector<bool> saved_;
};
}  // namespace

double base_loss(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) fail("base_loss expects (B,C) probabilities");
  const int B = probs.dim(0), C = probs.dim(1);
  if (static_cast<int>(labels.size()) != B) fail("base_loss: label count mismatch");
  double s = 0.0;
  for (int b = 0; b < B; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= C) fail("base_loss: label " + std::to_string(y) + " out of range");
    s -= std::log(std::max(probs.at(b, y), kLogEps));
  }
  return s / B;
}

double mean_p_log_p(const Tensor& probs) {
  if (probs.rank() != 2) fail("mean_p_log_p expects (B,C) probabilities");
  const int B = probs.dim(0), C = probs.dim(1);
  double s = 0.0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double p = probs.at(b, c);
      s += p * std::log(p + kLogEps);
    }
  return s / B;
}

double finetune_loss(const Tensor& p_support, const std::vector<int>& y_support,
                     const Tensor* p_query, const FotConfig& cfg) {
  const double ce = base_loss(p_support, y_support);
  if (!cfg.transductive) {
    if (p_query != nullptr) fail("finetune_loss: query probabilities given in inductive mode");
    return ce;
  }
  if (p_query == nullptr || p_query->size() == 0)
    fail("finetune_loss: transductive mode requires query probabilities");
  const double plogp = mean_p_log_p(*p_query);
  const double sign = cfg.entropy_sign == EntropySign::paper_literal ? 1.0 : -1.0;
  return ce + sign * cfg.entropy_weight * plogp;
}

double generator_loss_total(const GeneratorLossParts& parts, double lambda) {
  return lambda * parts.mse + parts.ce;
}

GeneratorLossParts generator_loss(const Tensor& pred_chw, const Tensor& target_chw,
                                  const FeatureExtractor& f, const CosineClassifier& c_b,
                                  int label) {
  if (!pred_chw.same_shape(target_chw))
    fail("generator_loss: pred " + pred_chw.shape_str() + " vs target " + target_chw.shape_str());
  GeneratorLossParts parts;
  {
    const std::int64_t n = pred_chw.size();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double d = pred_chw[i] - target_chw[i];
      s += d * d;
    }
    parts.mse = s / static_cast<double>(n);
  }
  const Tensor feats = extract_features(f, stack_batch({pred_chw}));
  const Tensor probs = classify(c_b, feats);
  parts.ce = base_loss(probs, {label});
  return parts;
}

// ---- train_base ---------------------------------------------------------------

namespace {
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}
}  // namespace

TrainStats train_base(const BaseTrainData& data, FeatureExtractor& f, CosineClassifier& c_b,
                      const FotConfig& cfg) {
  cfg.validate();
  if (data.ids.empty()) fail("train_base: base split is empty");
  if (data.ids.size() != data.labels.size()) fail("train_base: ids/labels size mismatch");

  f.set_trainable(true);
  c_b.set_trainable(true);
  ad::ParamRefs params = f.params();
  for (Parameter* p : c_b.params()) params.push_back(p);
  Adam opt(cfg.lr_base);
  Rng rng(cfg.seed);

  TrainStats stats;
  for (int epoch = 0; epoch < cfg.base_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(data.ids.size(), cfg.base_batch, rng)) {
      std::vector<Tensor> images;
      std::vector<int> labels;
      images.reserve(batch.size());
      for (std::size_t i : batch) {
        images.push_back(data.image_of(data.ids[i]));
        labels.push_back(data.labels[i]);
      }
      Tape t;
      Value x = t.input(stack_batch(images));
      Value loss = t.softmax_cross_entropy(c_b.logits(t, f.forward(t, x)), labels);
      Adam::zero_grad(params);
      t.backward(loss);
      opt.step(params);
      epoch_loss += t.val(loss)[0] * static_cast<double>(batch.size());
      seen += batch.size();
    }
    stats.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
  }

  // training accuracy, eval mode
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.ids.size(); ++i) {
    const Tensor feats = extract_features(f, stack_batch({data.image_of(data.ids[i])}));
    const Tensor probs = classify(c_b, feats);
    int argmax = 0;
    for (int c = 1; c < probs.dim(1); ++c)
      if (probs.at(0, c) > probs.at(0, argmax)) argmax = c;
    if (argmax == data.labels[i]) ++correct;
  }
  stats.final_train_accuracy = static_cast<double>(correct) / static_cast<double>(data.ids.size());
  return stats;
}

// ---- train_generator -----------------------------------------------------------

TrainStats train_generator(const GeneratorTrainData& data, FeatureExtractor& f,
                           CosineClassifier& c_b, Generator& g, const FotConfig& cfg) {
  cfg.validate();
  if (data.quads.empty()) fail("train_generator: quadruplet manifest is empty");

  ad::ParamRefs frozen = f.params();
  for (Parameter* p : c_b.params()) frozen.push_back(p);
  FreezeGuard guard(frozen);

  g.set_trainable(true);
  ad::ParamRefs params = g.params();
  Adam opt(cfg.lr_gen);
  Rng rng(cfg.seed);

  TrainStats stats;
  for (int epoch = 0; epoch < cfg.gen_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(data.quads.size(), cfg.gen_batch, rng)) {
      std::vector<Tensor> a1s, a2s, b1s, b2s;
      std::vector<int> labels;
      for (std::size_t i : batch) {
        const Quadruplet& q = data.quads[i];
        a1s.push_back(data.image_of(q.a1));
        a2s.push_back(data.image_of(q.a2));
        b1s.push_back(data.image_of(q.b1));
        b2s.push_back(data.image_of(q.b2));
        labels.push_back(data.base_label_of(q.b2));
      }
      Tape t;
      Value pred = g.forward(t, t.input(stack_batch(a1s)), t.input(stack_batch(a2s)),
                             t.input(stack_batch(b1s)));
      Value mse = t.mse(pred, t.input(stack_batch(b2s)));
      Value ce = t.softmax_cross_entropy(c_b.logits(t, f.forward(t, pred)), labels);
      Value loss = t.add(t.scale(mse, cfg.lambda_mse), ce);
      Adam::zero_grad(params);
      t.backward(loss);
      opt.step(params);
      epoch_loss += t.val(loss)[0] * static_cast<double>(batch.size());
      seen += batch.size();
    }
    stats.epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
  }
  return stats;
}

// ---- augment_support -------------------------------------------------------------

std::vector<ImageSample> augment_support(const std::vector<ImageSample>& support,
                                         const AugmentContext& ctx, int k, std::uint64_t seed) {
  if (k < 0) fail("augment_support: k must be >= 0");
  if (k == 0) return support;
  if (!ctx.generator || !ctx.d_g || !ctx.maps || !ctx.base_image_of || !ctx.support_map_of)
    fail("augment_support: incomplete context");

  // group by class, first-seen order
  std::vector<int> class_order;
  std::map<int, std::vector<const ImageSample*>> by_class;
  for (const auto& s : support) {
    if (!by_class.count(s.class_id)) class_order.push_back(s.class_id);
    by_class[s.class_id].push_back(&s);
  }

  std::vector<ImageSample> out = support;
  for (int cid : class_order) {
    const auto& members = by_class[cid];
    // j-th generated sample uses support member j % K, round-robin
    std::vector<int> per_member(members.size(), 0);
    for (int j = 0; j < k; ++j) ++per_member[static_cast<std::size_t>(j) % members.size()];
    int gen_index = 0;
    for (std::size_t m = 0; m < members.size(); ++m) {
      if (per_member[m] == 0) continue;
      const ImageSample& z = *members[m];
      const SaliencyMap z_map = ctx.support_map_of(z);
      const auto partners = find_posture_partners(z_map, *ctx.maps, *ctx.d_g, per_member[m],
                                                  seed ^ fnv1a(z.id));
      for (const auto& [x1, x2] : partners) {
        ImageSample gen;
        gen.id = z.id + "#gen" + std::to_string(gen_index++);
        gen.class_id = z.class_id;
        gen.split_role = z.split_role;
        gen.stage = "gen";
        gen.synthetic = true;
        gen.pixels = generate(*ctx.generator, ctx.base_image_of(x1), ctx.base_image_of(x2),
                              z.pixels);
        out.push_back(std::move(gen));
      }
    }
  }
  return out;
}

// ---- finetune ----------------------------------------------------------------------

FinetuneResult finetune(const Episode& episode, FeatureExtractor& f, CosineClassifier& c_n,
                        const FotConfig& cfg, const BatchObserver& observer) {
  cfg.validate();
  if (episode.support.empty()) fail("finetune: empty support set");
  if (c_n.num_classes() != episode.n_way)
    fail("finetune: classifier has " + std::to_string(c_n.num_classes()) + " classes, episode is " +
         std::to_string(episode.n_way) + "-way");

  std::vector<int> labels;
  labels.reserve(episode.support.size());
  for (const auto& s : episode.support) {
    auto it = episode.label_map.find(s.class_id);
    if (it == episode.label_map.end())
      fail("finetune: support sample class not in episode label map");
    labels.push_back(it->second);
  }
  std::vector<std::size_t> original_idx, all_idx;
  for (std::size_t i = 0; i < episode.support.size(); ++i) {
    all_idx.push_back(i);
    if (!episode.support[i].synthetic) original_idx.push_back(i);
  }
  if (original_idx.empty()) fail("finetune: support has no original samples");

  c_n.set_trainable(true);
  FinetuneResult result;

  if (!cfg.transductive) {
    // F frozen: features computed once, iterations touch only the classifier
    FreezeGuard freeze_f(f.params());
    std::vector<Tensor> pixels;
    pixels.reserve(episode.support.size());
    for (const auto& s : episode.support) pixels.push_back(s.pixels);
    const Tensor features = extract_features(f, stack_batch(pixels));
    const int d = features.dim(1);
    if (d != c_n.feature_dim())
      fail("finetune: feature dim " + std::to_string(d) + " does not match classifier dim " +
           std::to_string(c_n.feature_dim()));

    ad::ParamRefs params = c_n.params();
    Adam opt(cfg.lr_finetune);
    for (int iter = 0; iter < cfg.finetune_iters; ++iter) {
      const auto& idx = iter < cfg.original_only_iters ? original_idx : all_idx;
      if (observer) {
        std::vector<const ImageSample*> batch;
        for (std::size_t i : idx) batch.push_back(&episode.support[i]);
        observer(iter, batch);
      }
      Tensor fb({static_cast<int>(idx.size()), d});
      std::vector<int> yb;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        std::copy(features.data() + static_cast<std::int64_t>(idx[r]) * d,
                  features.data() + static_cast<std::int64_t>(idx[r] + 1) * d,
                  fb.data() + static_cast<std::int64_t>(r) * d);
        yb.push_back(labels[idx[r]]);
      }
      Tape t;
      Value loss = t.softmax_cross_entropy(c_n.logits(t, t.input(fb)), yb);
      Adam::zero_grad(params);
      t.backward(loss);
      opt.step(params);
      result.iter_losses.push_back(t.val(loss)[0]);
    }
    return result;
  }

  // transductive: F participates in the loss through the query entropy term
  if (episode.query.empty()) fail("finetune: transductive mode requires a query set");
  if (cfg.transductive_full_backbone) {
    f.set_trainable(true);
  } else {
    f.set_trainable(false);
    for (Parameter* p : f.final_block_params()) p->requires_grad = true;
  }
  ad::ParamRefs params;
  for (Parameter* p : f.params())
    if (p->requires_grad) params.push_back(p);
  for (Parameter* p : c_n.params()) params.push_back(p);
  Adam opt(cfg.lr_finetune);

  std::vector<Tensor> query_pixels;
  for (const auto& q : episode.query) query_pixels.push_back(q.pixels);
  const Tensor query_batch = stack_batch(query_pixels);
  const double n_query = static_cast<double>(episode.query.size());
  const double sign = cfg.entropy_sign == EntropySign::paper_literal ? 1.0 : -1.0;

  for (int iter = 0; iter < cfg.finetune_iters; ++iter) {
    const auto& idx = iter < cfg.original_only_iters ? original_idx : all_idx;
    if (observer) {
      std::vector<const ImageSample*> batch;
      for (std::size_t i : idx) batch.push_back(&episode.support[i]);
      observer(iter, batch);
    }
    std::vector<Tensor> sp;
    std::vector<int> yb;
    for (std::size_t i : idx) {
      sp.push_back(episode.support[i].pixels);
      yb.push_back(labels[i]);
    }
    Tape t;
    Value ce = t.softmax_cross_entropy(c_n.logits(t, f.forward(t, t.input(stack_batch(sp)))), yb);
    Value pq = t.softmax(c_n.logits(t, f.forward(t, t.input(query_batch))));
    Value plogp = t.sum_all(t.mul(pq, t.log_eps(pq, kLogEps)));
    Value loss = t.add(ce, t.scale(plogp, sign * cfg.entropy_weight / n_query));
    Adam::zero_grad(params);
    t.backward(loss);
    opt.step(params);
    result.iter_losses.push_back(t.val(loss)[0]);
  }
  return result;
}

}  // namespace fot
