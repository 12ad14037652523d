#include "retrostory/config.h"

#include <type_traits>

#include "retrostory/errors.h"

namespace retrostory {
namespace {

template <class T>
void assign_checked(const Json& value, T& field, const std::string& path) {
  using F = std::decay_t<T>;
  if constexpr (std::is_same_v<F, bool>) {
    if (!value.is_boolean()) throw ConfigError(path + ": expected a boolean");
    field = value.get<bool>();
  } else if constexpr (std::is_integral_v<F>) {
    if (!value.is_number_integer())
      throw ConfigError(path + ": expected an integer");
    if constexpr (std::is_unsigned_v<F>) {
      if (value.is_number_integer() && !value.is_number_unsigned() &&
          value.get<std::int64_t>() < 0)
        throw ConfigError(path + ": expected a non-negative integer");
    }
    field = value.get<F>();
  } else if constexpr (std::is_floating_point_v<F>) {
    if (!value.is_number()) throw ConfigError(path + ": expected a number");
    field = value.get<F>();
  } else {
    if (!value.is_string()) throw ConfigError(path + ": expected a string");
    field = value.get<F>();
  }
}

template <class T>
Json section_to_json(const T& s) {
  Json j = Json::object();
  T::fields(s, [&](const char* key, const auto& field) { j[key] = field; });
  return j;
}

template <class T>
void section_from_json(const Json& j, T& s, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    T::fields(s, [&](const char* name, auto& field) {
      if (key == name) {
        assign_checked(value, field, section + "." + key);
        found = true;
      }
    });
    if (!found) throw ConfigError("unknown config key: " + section + "." + key);
  }
}

Json parse_override_value(std::string_view text) {
  Json parsed = Json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) return Json(std::string(text));
  return parsed;
}

}  // namespace

const char* build_id() {
#ifdef RETROSTORY_BUILD_ID
  return RETROSTORY_BUILD_ID;
#else
  return "unknown";
#endif
}

int ModelConfig::retro_block_count() const {
  if (retro_density > n_blocks) return 0;
  return (n_blocks + retro_density - 1) / retro_density;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid model config: ") + what);
  };
  require(image_size > 0 && grid_size > 0, "image_size and grid_size must be positive");
  require(image_size % grid_size == 0, "grid_size must divide image_size");
  const int factor = image_size / grid_size;
  require(factor >= 1 && (factor & (factor - 1)) == 0,
          "image_size / grid_size must be a power of two");
  require(codebook_size >= 2, "codebook_size must be at least 2");
  require(code_dim > 0 && vae_channels > 0, "code_dim and vae_channels must be positive");
  require(commitment_beta >= 0.0, "commitment_beta must be non-negative");
  require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
          "d_model must be divisible by n_heads");
  require(n_blocks >= 1, "n_blocks must be at least 1");
  require(retro_density >= 1, "retro_density must be at least 1");
  require(ffn_mult >= 1, "ffn_mult must be at least 1");
  require(text_vocab >= 0, "text_vocab must be non-negative");
  require(text_length >= 2, "text_length must be at least 2");
  require(prompt_length >= 0, "prompt_length must be non-negative");
  require(max_frames >= 2, "max_frames must be at least 2");
  require(sentence_dim > 0 && story_heads > 0 && sentence_dim % story_heads == 0,
          "sentence_dim must be divisible by story_heads");
}

Json RunConfig::to_json() const {
  return Json{{"model", section_to_json(model)},
              {"train", section_to_json(train)},
              {"vae", section_to_json(vae)},
              {"classifier", section_to_json(classifier)},
              {"pretrain", section_to_json(pretrain)},
              {"gan", section_to_json(gan)},
              {"sampler", section_to_json(sampler)},
              {"synthetic", section_to_json(synthetic)}};
}

RunConfig RunConfig::from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") section_from_json(value, c.model, key);
    else if (key == "train") section_from_json(value, c.train, key);
    else if (key == "vae") section_from_json(value, c.vae, key);
    else if (key == "classifier") section_from_json(value, c.classifier, key);
    else if (key == "pretrain") section_from_json(value, c.pretrain, key);
    else if (key == "gan") section_from_json(value, c.gan, key);
    else if (key == "sampler") section_from_json(value, c.sampler, key);
    else if (key == "synthetic") section_from_json(value, c.synthetic, key);
    else throw ConfigError("unknown config section: " + key);
  }
  return c;
}

void RunConfig::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos)
    throw ConfigError("override must look like section.key=value: " +
                      std::string(assignment));
  const std::string path(assignment.substr(0, eq));
  const auto dot = path.find('.');
  if (dot == std::string::npos)
    throw ConfigError("override key must be section.key: " + path);
  Json patch = {{path.substr(0, dot),
                 {{path.substr(dot + 1), parse_override_value(assignment.substr(eq + 1))}}}};
  Json merged = to_json();
  merged.merge_patch(patch);
  // Strict parsing of the patch itself catches unknown keys.
  (void)from_json(patch);
  *this = from_json(merged);
}

RunConfig RunConfig::toy() {
  RunConfig c;
  c.model.image_size = 32;
  c.model.grid_size = 8;
  c.model.code_dim = 32;
  c.model.codebook_size = 128;
  c.model.vae_channels = 32;
  c.model.d_model = 128;
  c.model.n_heads = 4;
  c.model.n_blocks = 4;
  c.model.retro_density = 3;
  c.model.text_length = 16;
  c.model.prompt_length = 0;
  c.model.max_frames = 6;
  c.model.sentence_dim = 64;
  c.model.story_heads = 4;

  c.train.epochs = 5;
  c.train.batch_size = 32;
  c.train.lr_new = 3e-3;
  c.train.lr_pretrained = 1e-4;
  c.train.lr_prompt = 1e-3;
  c.train.warmup_steps = 40;

  c.vae.steps = 1500;
  c.vae.batch_size = 32;
  c.vae.lr = 2e-3;
  c.vae.render_frames = 2000;

  c.classifier.steps = 1500;

  c.pretrain.steps = 1500;
  c.pretrain.frames = 4000;

  c.gan.batch_size = 8;
  c.gan.feature_grid = 8;
  c.gan.channels = 32;

  c.sampler.temperature = 1.0;
  c.sampler.top_k = 64;

  c.synthetic.image_size = 32;
  c.synthetic.train = 1600;
  return c;
}

Json to_json(const ModelConfig& c) { return section_to_json(c); }

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  section_from_json(j, c, "model");
  return c;
}

Json to_json(const SamplerConfig& c) { return section_to_json(c); }

SamplerConfig sampler_config_from_json(const Json& j) {
  SamplerConfig c;
  section_from_json(j, c, "sampler");
  return c;
}

std::vector<std::string> config_differences(const ModelConfig& a,
                                            const ModelConfig& b) {
  const Json ja = to_json(a);
  const Json jb = to_json(b);
  std::vector<std::string> keys;
  for (const auto& [key, value] : ja.items())
    if (jb.at(key) != value) keys.push_back(key);
  return keys;
}

}  // namespace retrostory
