#pragma once

#include "dfd/archive.hpp"
#include "dfd/config_fields.hpp"
#include "dfd/nn/backbones.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace dfd {

enum class Architecture { resnet50, vit_b32, convnext_base };
enum class InitMode { random, imagenet, clip };
/// `tiny` builds width/depth-reduced variants of the same architectures for
/// tests and smoke runs; no published checkpoints exist for them.
enum class ModelVariant { standard, tiny };

inline constexpr Architecture kArchitectures[] = {Architecture::resnet50, Architecture::vit_b32,
                                                  Architecture::convnext_base};
inline constexpr InitMode kInitModes[] = {InitMode::random, InitMode::imagenet, InitMode::clip};

std::string to_string(Architecture a);
std::string to_string(InitMode m);
std::string to_string(ModelVariant v);
Architecture parse_architecture(const std::string& s);
InitMode parse_init_mode(const std::string& s);
ModelVariant parse_variant(const std::string& s);

/// Class order is fixed: logit 0 = real, logit 1 = fake.
inline constexpr int kRealClass = 0;
inline constexpr int kFakeClass = 1;

struct DetectorConfig {
  Architecture arch = Architecture::resnet50;
  InitMode init = InitMode::random;
  bool freeze_backbone = false;
  double dropout_rate = 0.2;
  Index input_side = 256;
  ModelVariant variant = ModelVariant::standard;
  /// Directory holding converted pretrained artifacts `<arch>-<init>.dfdw`.
  std::string weights_dir = "weights";
  /// Seeds the random backbone initialization and the head.
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const DetectorConfig& c);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

/// Normalization statistics the backbone expects: "clip" for CLIP weights,
/// "imagenet" otherwise (including random init).
std::string normalization_source(InitMode init);

/// Outcome of copying named tensors from an archive into a module.
struct LoadReport {
  std::vector<std::string> matched;
  std::vector<std::string> resized;         // positional embeddings interpolated to the new grid
  std::vector<std::string> missing;         // in the module, absent from the archive
  std::vector<std::string> unexpected;      // in the archive, absent from the module
  std::vector<std::string> shape_mismatch;  // present in both with incompatible shapes

  bool complete() const { return missing.empty() && shape_mismatch.empty(); }
  nlohmann::json to_json() const;
};

/// Copies archive tensors named `<archive_prefix><name>` into the module's
/// parameters and buffers. Positional embeddings whose token grid differs are
/// bilinearly resampled.
template <typename Scalar>
LoadReport load_state(nn::Module<Scalar>& module, const TensorArchive& archive, const std::string& archive_prefix = "");

/// Adds every parameter and buffer of `module` to `archive` as float32.
template <typename Scalar>
void export_state(nn::Module<Scalar>& module, TensorArchive& archive, const std::string& prefix = "");

/// Resamples a [g0*g0 (+1), W] token embedding to [g1*g1 (+1), W]; the
/// leading class-token row, when present, is kept as is.
Tensor<float> resize_positional_embedding(const Tensor<float>& pos, Index new_tokens);

template <typename Scalar>
std::unique_ptr<nn::Backbone<Scalar>> make_backbone(Architecture arch, ModelVariant variant, Index input_side);

struct ParameterCounts {
  std::int64_t total = 0;
  std::int64_t trainable = 0;
};

/// Backbone + dropout + linear head (D -> 2). Parameter names are the
/// backbone's under "backbone." and the head's under "head.fc.".
template <typename Scalar>
class Detector : public nn::Module<Scalar> {
 public:
  /// Builds the architecture with seeded random weights; see build_detector
  /// for pretrained initialization.
  explicit Detector(const DetectorConfig& config);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override;
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_logits) override;
  Shape trace(const Shape& in, nn::OpCounter& ops) const override;
  std::string_view kind() const override { return "detector"; }

  /// Logits [N, 2]. Dropout (and batch-norm statistics of a trainable
  /// backbone) are active only when `training_mode`.
  Tensor<Scalar> logits(const Tensor<Scalar>& batch, bool training_mode);

  /// Train/eval switch that keeps a frozen backbone in eval mode.
  void set_mode(bool training_mode);
  void set_freeze(bool frozen);

  ParameterCounts parameter_counts();
  std::vector<nn::NamedParameter<Scalar>> trainable_parameters();

  nn::Backbone<Scalar>& backbone() { return *backbone_; }
  nn::Linear<Scalar>& head() { return *fc_; }
  nn::Dropout<Scalar>& dropout() { return *dropout_; }
  const DetectorConfig& config() const { return config_; }

  /// Report from the pretrained load, empty for random init.
  LoadReport pretrained_report;

  void reset_head(std::uint64_t seed);
  /// Records which initialization the weights descend from (checkpoint reload).
  void set_init_provenance(InitMode init) { config_.init = init; }

 private:
  void check_input(const Shape& s) const;

  DetectorConfig config_;
  nn::Backbone<Scalar>* backbone_ = nullptr;
  nn::Dropout<Scalar>* dropout_ = nullptr;
  nn::Linear<Scalar>* fc_ = nullptr;
};

/// Path of the converted pretrained artifact for (arch, init).
std::filesystem::path weights_artifact_path(const DetectorConfig& config);

/// Builds a detector. With init != random the backbone is loaded from the
/// converted artifact (ArchiveError if missing or corrupt, ValidationError
/// for combinations without a published checkpoint); the head is always
/// freshly initialized.
std::unique_ptr<Detector<float>> build_detector(const DetectorConfig& config);

/// Softmax probability of the fake class per row of [N, 2] logits.
template <typename Scalar>
std::vector<double> fake_scores(const Tensor<Scalar>& logits);

/// Eval-mode fake probabilities for a batch.
std::vector<double> predict_scores(Detector<float>& detector, const Tensor<float>& batch);

inline constexpr const char* kCheckpointFormat = "dfd-checkpoint";
inline constexpr int kCheckpointVersion = 1;

/// Self-describing checkpoint: config, normalization source, all weights;
/// `extra_meta` and `extra_tensors` carry optimizer state for training runs.
void save_checkpoint(Detector<float>& detector, const std::filesystem::path& path,
                     const nlohmann::json& extra_meta = nlohmann::json::object(),
                     const std::map<std::string, Tensor<float>>& extra_tensors = {});

struct LoadedCheckpoint {
  std::unique_ptr<Detector<float>> detector;
  TensorArchive archive;  // full contents, including any extra tensors
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dfd
