#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fot/datamodel.hpp"
#include "fot/miner.hpp"
#include "fot/networks.hpp"

namespace fot {

enum class EntropySign { minimize_entropy, paper_literal };

std::string to_string(EntropySign s);
EntropySign entropy_sign_from_string(const std::string& s);

// Training hyperparameters. Defaults follow the published settings where they
// exist; the rest are declared here and overridable from config files.
struct FotConfig {
  double lambda_mse = 1.0;
  int k_generated = -1;  // -1: auto (3 for 1-shot, 5 otherwise)
  int finetune_iters = 100;
  int original_only_iters = 40;
  int gen_epochs = 1000;
  int gen_batch = 32;
  int base_epochs = 50;
  int base_batch = 32;
  double lr_base = 1e-3;
  double lr_gen = 1e-3;
  double lr_finetune = 1e-3;
  std::uint64_t seed = 0;
  bool transductive = false;
  EntropySign entropy_sign = EntropySign::minimize_entropy;
  double entropy_weight = 1.0;
  bool transductive_full_backbone = true;  // false: only the final block of F updates

  int resolve_k(int k_shot) const;
  void validate() const;
};

// ---- losses (probability-space closed forms) -------------------------------

// -(1/B) sum log p[y]; log stabilized at 1e-12.
double base_loss(const Tensor& probs, const std::vector<int>& labels);

// (1/B) sum_x sum_c p log(p + 1e-12)  (== minus mean Shannon entropy)
double mean_p_log_p(const Tensor& probs);

// Inductive: CE(support). Transductive: CE + entropy term over the query
// probabilities, signed per cfg.entropy_sign and scaled by cfg.entropy_weight.
double finetune_loss(const Tensor& p_support, const std::vector<int>& y_support,
                     const Tensor* p_query, const FotConfig& cfg);

// ---- generator loss ---------------------------------------------------------

struct GeneratorLossParts {
  double mse = 0.0;
  double ce = 0.0;
};

double generator_loss_total(const GeneratorLossParts& parts, double lambda);

// lambda * MSE(pred, target) + CE(C_b(F(pred)), y), with F and C_b frozen.
GeneratorLossParts generator_loss(const Tensor& pred_chw, const Tensor& target_chw,
                                  const FeatureExtractor& f, const CosineClassifier& c_b,
                                  int label);

// ---- training procedures ----------------------------------------------------

struct TrainStats {
  std::vector<double> epoch_losses;
  double final_train_accuracy = 0.0;
};

struct BaseTrainData {
  std::vector<std::string> ids;
  std::vector<int> labels;  // indices into C_b's classes
  std::function<Tensor(const std::string&)> image_of;  // extractor-stage pixels
};

TrainStats train_base(const BaseTrainData& data, FeatureExtractor& f, CosineClassifier& c_b,
                      const FotConfig& cfg);

struct GeneratorTrainData {
  std::vector<Quadruplet> quads;
  std::function<Tensor(const std::string&)> image_of;       // extractor-stage pixels
  std::function<int(const std::string&)> base_label_of;     // sample id -> C_b class index
};

// Minimizes the generator loss over the quadruplet manifest. Only the
// generator's parameters receive updates; F and C_b stay frozen.
TrainStats train_generator(const GeneratorTrainData& data, FeatureExtractor& f,
                           CosineClassifier& c_b, Generator& g, const FotConfig& cfg);

// ---- support augmentation ---------------------------------------------------

struct AugmentContext {
  const Generator* generator = nullptr;
  const std::vector<Quadruplet>* d_g = nullptr;
  const MatchMapStore* maps = nullptr;
  std::function<Tensor(const std::string&)> base_image_of;         // extractor-stage pixels
  std::function<SaliencyMap(const ImageSample&)> support_map_of;   // saliency of a support sample
};

// Adds exactly k generated samples per novel class, labeled with that class
// and flagged synthetic. Partners are chosen per support sample round-robin.
std::vector<ImageSample> augment_support(const std::vector<ImageSample>& support,
                                         const AugmentContext& ctx, int k, std::uint64_t seed);

// ---- episodic fine-tuning ----------------------------------------------------

struct FinetuneResult {
  std::vector<double> iter_losses;
};

// Called once per iteration with the samples of that iteration's batch.
using BatchObserver = std::function<void(int iter, const std::vector<const ImageSample*>& batch)>;

// Trains C_n on the episode support for cfg.finetune_iters iterations.
// Iterations [0, original_only_iters) see only non-synthetic samples, the
// rest see the full support. Inductive mode leaves F untouched; transductive
// mode additionally updates F using the unlabeled query set.
FinetuneResult finetune(const Episode& episode, FeatureExtractor& f, CosineClassifier& c_n,
                        const FotConfig& cfg, const BatchObserver& observer = nullptr);

}  // namespace fot
