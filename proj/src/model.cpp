#include "dfd/model.hpp"

#include <cmath>
#include <random>
#include <set>

namespace dfd {
namespace fs = std::filesystem;

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::resnet50: return "resnet50";
    case Architecture::vit_b32: return "vit_b32";
    case Architecture::convnext_base: return "convnext_base";
  }
  return "?";
}

std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::random: return "random";
    case InitMode::imagenet: return "imagenet";
    case InitMode::clip: return "clip";
  }
  return "?";
}

std::string to_string(ModelVariant v) { return v == ModelVariant::tiny ? "tiny" : "standard"; }

Architecture parse_architecture(const std::string& s) {
  for (auto a : kArchitectures) {
    if (to_string(a) == s) return a;
  }
  throw ValidationError("unknown architecture '" + s + "' (expected resnet50, vit_b32 or convnext_base)");
}

InitMode parse_init_mode(const std::string& s) {
  for (auto m : kInitModes) {
    if (to_string(m) == s) return m;
  }
  throw ValidationError("unknown init mode '" + s + "' (expected random, imagenet or clip)");
}

ModelVariant parse_variant(const std::string& s) {
  if (s == "standard") return ModelVariant::standard;
  if (s == "tiny") return ModelVariant::tiny;
  throw ValidationError("unknown model variant '" + s + "' (expected standard or tiny)");
}

std::string normalization_source(InitMode init) { return init == InitMode::clip ? "clip" : "imagenet"; }

void DetectorConfig::validate() const {
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, "model.dropout_rate must be in [0, 1)");
  require(input_side > 0 && input_side % 32 == 0, "model.input_side must be a positive multiple of 32");
  require(!(variant == ModelVariant::tiny && init != InitMode::random),
          "no published checkpoint exists for the tiny " + to_string(arch) + " variant; use init=random");
}

nlohmann::json to_json(const DetectorConfig& c) {
  return {{"arch", to_string(c.arch)},         {"init", to_string(c.init)},
          {"freeze_backbone", c.freeze_backbone}, {"dropout_rate", c.dropout_rate},
          {"input_side", c.input_side},       {"variant", to_string(c.variant)},
          {"weights_dir", c.weights_dir},     {"seed", c.seed}};
}

DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  DetectorConfig c;
  FieldReader r(j, "model");
  std::string s;
  if (r.get("arch", s)) c.arch = parse_architecture(s);
  if (r.get("init", s)) c.init = parse_init_mode(s);
  if (r.get("variant", s)) c.variant = parse_variant(s);
  r.get("freeze_backbone", c.freeze_backbone);
  r.get("dropout_rate", c.dropout_rate);
  r.get("input_side", c.input_side);
  r.get("weights_dir", c.weights_dir);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

nlohmann::json LoadReport::to_json() const {
  return {{"matched", matched.size()},   {"resized", resized},
          {"missing", missing},          {"unexpected", unexpected},
          {"shape_mismatch", shape_mismatch}};
}

Tensor<float> resize_positional_embedding(const Tensor<float>& pos, Index new_tokens) {
  expect_rank(pos.shape(), 2, "resize_positional_embedding");
  const Index old_tokens = pos.dim(0), width = pos.dim(1);
  auto square_side = [](Index n) -> Index {
    const auto s = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
    return s * s == n ? s : -1;
  };
  // Grids with a class-token row have n = g*g + 1.
  Index lead = 0;
  Index g0 = square_side(old_tokens), g1 = square_side(new_tokens);
  if (g0 < 0 || g1 < 0) {
    lead = 1;
    g0 = square_side(old_tokens - 1);
    g1 = square_side(new_tokens - 1);
  }
  if (g0 <= 0 || g1 <= 0) {
    throw ShapeError("cannot resample positional embedding " + to_string(pos.shape()) + " to " +
                     std::to_string(new_tokens) + " tokens");
  }
  Tensor<float> out({new_tokens, width});
  if (lead) out.block(0, 1, width) = pos.block(0, 1, width);
  const double scale = static_cast<double>(g0) / static_cast<double>(g1);
  auto src = [&](Index y, Index x) { return pos.block((lead + y * g0 + x) * width, 1, width); };
  for (Index y = 0; y < g1; ++y) {
    const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, static_cast<double>(g0 - 1));
    const Index y0 = static_cast<Index>(sy), y1 = std::min(y0 + 1, g0 - 1);
    const float wy = static_cast<float>(sy - y0);
    for (Index x = 0; x < g1; ++x) {
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, static_cast<double>(g0 - 1));
      const Index x0 = static_cast<Index>(sx), x1 = std::min(x0 + 1, g0 - 1);
      const float wx = static_cast<float>(sx - x0);
      out.block((lead + y * g1 + x) * width, 1, width) =
          (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) + wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

template <typename Scalar>
LoadReport load_state(nn::Module<Scalar>& module, const TensorArchive& archive, const std::string& archive_prefix) {
  LoadReport report;
  std::set<std::string> used;
  for (auto& [name, p] : module.named_parameters()) {
    const std::string key = archive_prefix + name;
    auto it = archive.tensors.find(key);
    if (it == archive.tensors.end()) {
      report.missing.push_back(name);
      continue;
    }
    used.insert(key);
    const Tensor<float>* src = &it->second;
    Tensor<float> resized;
    if (src->shape() != p->value.shape()) {
      const bool positional = name.size() >= 20 && name.ends_with("positional_embedding");
      if (positional && src->rank() == 2 && p->value.rank() == 2 && src->dim(1) == p->value.dim(1)) {
        resized = resize_positional_embedding(*src, p->value.dim(0));
        src = &resized;
        report.resized.push_back(name);
      } else {
        report.shape_mismatch.push_back(name + " " + to_string(src->shape()) + " vs " + to_string(p->value.shape()));
        continue;
      }
    }
    p->value.array() = src->array().template cast<Scalar>();
    report.matched.push_back(name);
  }
  for (const auto& [key, t] : archive.tensors) {
    if (key.rfind(archive_prefix, 0) == 0 && !used.count(key)) report.unexpected.push_back(key);
  }
  return report;
}

template <typename Scalar>
void export_state(nn::Module<Scalar>& module, TensorArchive& archive, const std::string& prefix) {
  for (auto& [name, p] : module.named_parameters()) archive.tensors[prefix + name] = p->value.template cast<float>();
}

template <typename Scalar>
std::unique_ptr<nn::Backbone<Scalar>> make_backbone(Architecture arch, ModelVariant variant, Index input_side) {
  const bool tiny = variant == ModelVariant::tiny;
  switch (arch) {
    case Architecture::resnet50: {
      nn::ResNetSpec spec;
      spec.image_size = input_side;
      if (tiny) {
        spec.layers = {1, 1, 1, 1};
        spec.width = 8;
        spec.heads = 2;
        spec.output_dim = 32;
      }
      return std::make_unique<nn::ResNetBackbone<Scalar>>(spec);
    }
    case Architecture::vit_b32: {
      nn::ViTSpec spec;
      spec.image_size = input_side;
      if (tiny) {
        spec.width = 32;
        spec.layers = 2;
        spec.heads = 4;
        spec.output_dim = 16;
      }
      return std::make_unique<nn::VisionTransformerBackbone<Scalar>>(spec);
    }
    case Architecture::convnext_base: {
      nn::ConvNeXtSpec spec;
      spec.image_size = input_side;
      if (tiny) {
        spec.depths = {1, 1, 1, 1};
        spec.dims = {8, 16, 32, 64};
        spec.output_dim = 16;
      }
      return std::make_unique<nn::ConvNeXtBackbone<Scalar>>(spec);
    }
  }
  throw std::invalid_argument("unknown architecture");
}

template <typename Scalar>
Detector<Scalar>::Detector(const DetectorConfig& config) : config_(config) {
  config_.validate();
  backbone_ = &this->register_module("backbone", make_backbone<Scalar>(config.arch, config.variant, config.input_side));
  auto head = std::make_unique<nn::Sequential<Scalar>>();
  dropout_ = &head->add("drop", std::make_unique<nn::Dropout<Scalar>>(config.dropout_rate));
  fc_ = &head->add("fc", std::make_unique<nn::Linear<Scalar>>(backbone_->feature_dim(), 2));
  this->register_module("head", std::move(head));
  backbone_->reset_parameters(config.seed);
  reset_head(config.seed);
  set_freeze(config.freeze_backbone);
}

template <typename Scalar>
void Detector<Scalar>::reset_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x6865616455ULL);
  std::normal_distribution<double> dist(0.0, 0.01);
  auto& w = fc_->weight().value;
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(dist(rng));
  fc_->bias().value.set_zero();
  dropout_->reseed(seed ^ 0x64726f70ULL);
}

template <typename Scalar>
void Detector<Scalar>::set_freeze(bool frozen) {
  config_.freeze_backbone = frozen;
  backbone_->set_frozen(frozen);
}

template <typename Scalar>
void Detector<Scalar>::set_mode(bool training_mode) {
  this->set_training(training_mode);
  if (config_.freeze_backbone) backbone_->set_training(false);
}

template <typename Scalar>
void Detector<Scalar>::check_input(const Shape& s) const {
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.input_side || s[3] != config_.input_side) {
    throw ShapeError("detector expects [N, 3, " + std::to_string(config_.input_side) + ", " +
                     std::to_string(config_.input_side) + "], got " + to_string(s));
  }
}

template <typename Scalar>
Tensor<Scalar> Detector<Scalar>::forward(const Tensor<Scalar>& x) {
  check_input(x.shape());
  const bool record_backbone = this->recording() && !config_.freeze_backbone;
  const bool recording = this->recording();
  // A frozen backbone never needs its activations kept.
  if (!record_backbone && recording) backbone_->set_recording(false);
  Tensor<Scalar> features = backbone_->forward(x);
  if (!record_backbone && recording) backbone_->set_recording(true);
  return fc_->forward(dropout_->forward(features));
}

template <typename Scalar>
Tensor<Scalar> Detector<Scalar>::backward(const Tensor<Scalar>& grad_logits) {
  Tensor<Scalar> g = dropout_->backward(fc_->backward(grad_logits));
  if (config_.freeze_backbone) return {};
  return backbone_->backward(g);
}

template <typename Scalar>
Shape Detector<Scalar>::trace(const Shape& in, nn::OpCounter& ops) const {
  check_input(in);
  const Shape features = backbone_->trace(in, ops);
  return fc_->trace(dropout_->trace(features, ops), ops);
}

template <typename Scalar>
Tensor<Scalar> Detector<Scalar>::logits(const Tensor<Scalar>& batch, bool training_mode) {
  set_mode(training_mode);
  this->set_recording(false);
  return forward(batch);
}

template <typename Scalar>
ParameterCounts Detector<Scalar>::parameter_counts() {
  ParameterCounts c;
  for (auto& [name, p] : this->named_parameters()) {
    if (p->role == nn::Role::buffer) continue;
    c.total += p->value.size();
    if (p->trainable()) c.trainable += p->value.size();
  }
  return c;
}

template <typename Scalar>
std::vector<nn::NamedParameter<Scalar>> Detector<Scalar>::trainable_parameters() {
  std::vector<nn::NamedParameter<Scalar>> out;
  for (auto& np : this->named_parameters()) {
    if (np.second->trainable()) out.push_back(np);
  }
  return out;
}

template <typename Scalar>
std::vector<double> fake_scores(const Tensor<Scalar>& logits) {
  expect_rank(logits.shape(), 2, "fake_scores");
  if (logits.dim(1) != 2) throw ShapeError("fake_scores expects [N, 2] logits, got " + to_string(logits.shape()));
  std::vector<double> out(static_cast<std::size_t>(logits.dim(0)));
  for (Index i = 0; i < logits.dim(0); ++i) {
    const double d = static_cast<double>(logits[2 * i + kRealClass]) - static_cast<double>(logits[2 * i + kFakeClass]);
    out[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(d));
  }
  return out;
}

std::vector<double> predict_scores(Detector<float>& detector, const Tensor<float>& batch) {
  return fake_scores(detector.logits(batch, false));
}

fs::path weights_artifact_path(const DetectorConfig& config) {
  return fs::path(config.weights_dir) / (to_string(config.arch) + "-" + to_string(config.init) + ".dfdw");
}

std::unique_ptr<Detector<float>> build_detector(const DetectorConfig& config) {
  auto detector = std::make_unique<Detector<float>>(config);
  if (config.init == InitMode::random) return detector;

  const fs::path path = weights_artifact_path(config);
  if (!fs::exists(path)) {
    throw ArchiveError("pretrained weights for " + to_string(config.arch) + "/" + to_string(config.init) +
                       " not found at " + path.string() + " (convert them with tools/convert_weights.py)");
  }
  const TensorArchive archive = load_archive(path);
  if (archive.meta.contains("arch") && archive.meta["arch"] != to_string(config.arch)) {
    throw ArchiveError(path.string() + " holds weights for " + archive.meta["arch"].dump() + ", not " +
                       to_string(config.arch));
  }
  detector->pretrained_report = load_state(detector->backbone(), archive);
  if (detector->pretrained_report.matched.empty()) {
    throw ArchiveError(path.string() + ": no tensor matches the " + to_string(config.arch) + " backbone");
  }
  return detector;
}

void save_checkpoint(Detector<float>& detector, const fs::path& path, const nlohmann::json& extra_meta,
                     const std::map<std::string, Tensor<float>>& extra_tensors) {
  TensorArchive archive;
  archive.meta = {{"format", kCheckpointFormat},
                  {"version", kCheckpointVersion},
                  {"model", to_json(detector.config())},
                  {"normalization", normalization_source(detector.config().init)},
                  {"extra", extra_meta}};
  export_state(detector, archive);
  for (const auto& [name, t] : extra_tensors) archive.tensors[name] = t;
  save_archive(archive, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  LoadedCheckpoint out;
  out.archive = load_archive(path);
  const auto& meta = out.archive.meta;
  if (meta.value("format", "") != kCheckpointFormat) throw ArchiveError(path.string() + " is not a detector checkpoint");
  if (meta.value("version", 0) != kCheckpointVersion) {
    throw ArchiveError(path.string() + ": unsupported checkpoint version " + meta.value("version", nlohmann::json()).dump());
  }
  DetectorConfig config = detector_config_from_json(meta.at("model"));
  const InitMode init = config.init;
  config.init = InitMode::random;  // weights come from the checkpoint itself
  out.detector = std::make_unique<Detector<float>>(config);
  const LoadReport report = load_state(*out.detector, out.archive);
  if (!report.complete()) {
    throw ArchiveError(path.string() + ": corrupt checkpoint (" + std::to_string(report.missing.size()) +
                       " missing, " + std::to_string(report.shape_mismatch.size()) + " mismatched tensors)");
  }
  out.detector->set_init_provenance(init);
  return out;
}

#define DFD_INSTANTIATE_MODEL(S)                                                                               \
  template class Detector<S>;                                                                                  \
  template LoadReport load_state<S>(nn::Module<S>&, const TensorArchive&, const std::string&);                \
  template void export_state<S>(nn::Module<S>&, TensorArchive&, const std::string&);                          \
  template std::unique_ptr<nn::Backbone<S>> make_backbone<S>(Architecture, ModelVariant, Index);              \
  template std::vector<double> fake_scores<S>(const Tensor<S>&);

DFD_INSTANTIATE_MODEL(float)
DFD_INSTANTIATE_MODEL(double)

}  // namespace dfd
