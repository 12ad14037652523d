#include <algorithm>
#include <cmath>
#include <random>

#include "retrostory/data.h"
#include "retrostory/errors.h"

namespace retrostory::data {
namespace {

struct NamedColor {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

constexpr NamedColor kCharacterColors[] = {
    {"red", {230, 40, 40}},     {"blue", {40, 80, 230}},    {"green", {40, 170, 60}},
    {"yellow", {240, 220, 40}}, {"purple", {140, 60, 190}}, {"orange", {245, 140, 30}},
    {"pink", {250, 150, 200}},  {"cyan", {60, 220, 230}},   {"white", {245, 245, 245}},
    {"black", {15, 15, 15}},    {"brown", {130, 80, 40}},   {"lime", {170, 240, 80}},
};

constexpr NamedColor kBackgrounds[] = {
    {"slate", {70, 80, 100}}, {"sand", {194, 178, 128}}, {"olive", {110, 120, 50}},
    {"navy", {20, 30, 80}},   {"teal", {0, 110, 110}},   {"maroon", {100, 20, 30}},
};

constexpr const char* kShapes[] = {"circle", "square", "triangle", "diamond"};

// Scene geometry in a 32-unit square, scaled to the image size. Characters
// fill 8x8-unit cells and the ground starts at a multiple of 4 units, so at
// the toy resolution every cell boundary falls on a token boundary.
constexpr double kUnits = 32.0;
constexpr double kRadius = 4.0;
constexpr double kGroundY = 28.0;

double side_x(Side side) {
  switch (side) {
    case Side::kLeft: return 8.0;
    case Side::kMiddle: return 16.0;
    case Side::kRight: return 24.0;
  }
  return 16.0;
}

double action_y(Action action) { return action == Action::kWalk ? 20.0 : 12.0; }

const char* side_word(Side side) {
  switch (side) {
    case Side::kLeft: return "left";
    case Side::kMiddle: return "center";
    case Side::kRight: return "right";
  }
  return "";
}

bool inside(int shape, double dx, double dy) {
  switch (shape) {
    case 0: return dx * dx + dy * dy <= kRadius * kRadius;
    case 1: return std::abs(dx) <= 0.85 * kRadius && std::abs(dy) <= 0.85 * kRadius;
    case 2: return dy >= -kRadius && dy <= kRadius && std::abs(dx) <= (dy + kRadius) * 0.5;
    default: return std::abs(dx) + std::abs(dy) <= kRadius;
  }
}

class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  int below(int n) { return static_cast<int>(rng_() % static_cast<std::uint64_t>(n)); }
  double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<size_t>(below(static_cast<int>(i)))]);
  }

 private:
  std::mt19937_64 rng_;
};

void check_spec(const SyntheticSpec& spec) {
  const int total = spec.n_chars + spec.n_unseen;
  if (spec.n_chars < 1 || spec.n_unseen < 0 ||
      total > static_cast<int>(std::size(kCharacterColors)))
    throw ConfigError("synthetic: n_chars + n_unseen must be in [1, " +
                      std::to_string(std::size(kCharacterColors)) + "]");
  if (spec.n_backgrounds < 1 || spec.n_backgrounds > static_cast<int>(std::size(kBackgrounds)))
    throw ConfigError("synthetic: n_backgrounds must be in [1, " +
                      std::to_string(std::size(kBackgrounds)) + "]");
  if (spec.frames_per_story < 2) throw ConfigError("synthetic: frames_per_story must be >= 2");
  if (spec.image_size < 8) throw ConfigError("synthetic: image_size must be >= 8");
  if (spec.unseen_fraction < 0.0 || spec.unseen_fraction > 1.0)
    throw ConfigError("synthetic: unseen_fraction must be in [0, 1]");
  if (spec.n_unseen == 0 && spec.unseen_fraction > 0.0 && spec.test > 0)
    throw ConfigError("synthetic: unseen_fraction > 0 requires n_unseen > 0");
  if (spec.train < 0 || spec.val < 0 || spec.test < 0)
    throw ConfigError("synthetic: split sizes must be non-negative");
}

std::string describe(const CharacterStyle& style, const Placement& p, bool with_color) {
  std::string out = with_color ? style.color_name + " " : "";
  out += style.shape;
  out += p.action == Action::kWalk ? " walks " : " jumps ";
  out += side_word(p.side);
  return out;
}

std::string caption_for(const Scene& scene, const std::vector<CharacterStyle>& styles,
                        double color_prob, Draw& draw) {
  std::string out;
  for (const auto& p : scene.placements) {
    if (!out.empty()) out += " and ";
    out += describe(styles[static_cast<size_t>(p.character)], p, draw.unit() < color_prob);
  }
  return out;
}

// Placements sorted left to right so captions read in spatial order.
void sort_placements(Scene& scene) {
  std::sort(scene.placements.begin(), scene.placements.end(),
            [](const Placement& a, const Placement& b) { return a.side < b.side; });
}

std::vector<Side> random_sides(int n, Draw& draw) {
  std::vector<Side> sides = {Side::kLeft, Side::kMiddle, Side::kRight};
  draw.shuffle(sides);
  sides.resize(static_cast<size_t>(n));
  return sides;
}

// 1 or 2 characters with distinct shapes; when `unseen` is set, the first is
// drawn from the unseen ids.
std::vector<int> pick_characters(const SyntheticSpec& spec, bool unseen, Draw& draw) {
  std::vector<int> chars;
  chars.push_back(unseen ? spec.n_chars + draw.below(spec.n_unseen) : draw.below(spec.n_chars));
  if (draw.unit() < 0.5) {
    std::vector<int> options;
    for (int c = 0; c < spec.n_chars; ++c)
      if (c % 4 != chars[0] % 4) options.push_back(c);
    if (!options.empty()) chars.push_back(options[static_cast<size_t>(draw.below(static_cast<int>(options.size())))]);
  }
  draw.shuffle(chars);
  return chars;
}

StorySample make_story(const SyntheticSpec& spec, const std::vector<CharacterStyle>& styles,
                       Split split, int index, bool unseen, Draw& draw) {
  StorySample sample;
  sample.split = split;
  char id[64];
  std::snprintf(id, sizeof(id), "syn-%s-%05d", to_string(split), index);
  sample.id = id;
  sample.video_id = id;

  const auto chars = pick_characters(spec, unseen, draw);
  const int background = draw.below(spec.n_backgrounds);

  Scene source{background, {}};
  const auto sides = random_sides(static_cast<int>(chars.size()), draw);
  for (size_t i = 0; i < chars.size(); ++i) source.placements.push_back({chars[i], sides[i], Action::kWalk});
  sort_placements(source);

  auto add = [&](const Scene& scene, double color_prob) {
    sample.captions.push_back(caption_for(scene, styles, color_prob, draw));
    sample.frames.push_back(std::make_shared<const Image>(render_scene(scene, spec)));
    LabelSet labels;
    for (const auto& p : scene.placements) labels.insert(p.character);
    sample.char_labels.push_back(labels);
  };
  add(source, 1.0);

  for (int t = 1; t < spec.frames_per_story; ++t) {
    std::vector<int> shown = chars;
    if (shown.size() > 1 && draw.unit() < 0.3) shown.erase(shown.begin() + draw.below(static_cast<int>(shown.size())));
    Scene target{background, {}};
    const auto target_sides = random_sides(static_cast<int>(shown.size()), draw);
    for (size_t i = 0; i < shown.size(); ++i)
      target.placements.push_back({shown[i], target_sides[i], draw.unit() < 0.5 ? Action::kWalk : Action::kJump});
    sort_placements(target);
    add(target, spec.color_mention_prob);
  }
  return sample;
}

}  // namespace

std::vector<CharacterStyle> character_styles(const SyntheticSpec& spec) {
  check_spec(spec);
  std::vector<CharacterStyle> out;
  for (int k = 0; k < spec.n_chars + spec.n_unseen; ++k)
    out.push_back({kCharacterColors[k].name, kCharacterColors[k].rgb, kShapes[k % 4]});
  return out;
}

Image render_scene(const Scene& scene, const SyntheticSpec& spec) {
  const auto styles = character_styles(spec);
  if (scene.background < 0 || scene.background >= spec.n_backgrounds)
    throw ValidationError("render_scene: background out of range");
  const int size = spec.image_size;
  Image image(size, size);
  const auto& bg = kBackgrounds[scene.background].rgb;
  const double scale = kUnits / size;
  for (int y = 0; y < size; ++y) {
    const double uy = (y + 0.5) * scale;
    const bool ground = uy >= kGroundY;
    for (int x = 0; x < size; ++x) {
      std::uint8_t* px = image.pixel(y, x);
      for (int c = 0; c < 3; ++c) px[c] = ground ? static_cast<std::uint8_t>(bg[c] * 7 / 10) : bg[c];
    }
  }
  for (const auto& p : scene.placements) {
    if (p.character < 0 || p.character >= static_cast<int>(styles.size()))
      throw ValidationError("render_scene: character id out of range");
    const auto& rgb = styles[static_cast<size_t>(p.character)].color;
    const int shape = p.character % 4;
    const double cx = side_x(p.side), cy = action_y(p.action);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!inside(shape, (x + 0.5) * scale - cx, (y + 0.5) * scale - cy)) continue;
        std::uint8_t* px = image.pixel(y, x);
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
      }
    }
  }
  return image;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  const auto styles = character_styles(spec);
  Dataset dataset;
  dataset.name = "synthetic";
  dataset.format = "synthetic";
  dataset.n_chars = spec.n_chars + spec.n_unseen;
  for (const auto& s : styles) dataset.char_names.push_back(s.color_name + " " + s.shape);

  Draw draw(spec.seed);
  for (int i = 0; i < spec.train; ++i)
    dataset.samples.push_back(make_story(spec, styles, Split::kTrain, i, false, draw));
  for (int i = 0; i < spec.val; ++i)
    dataset.samples.push_back(make_story(spec, styles, Split::kVal, i, false, draw));
  const int n_unseen = spec.n_unseen > 0
                           ? static_cast<int>(std::lround(spec.unseen_fraction * spec.test))
                           : 0;
  std::vector<bool> unseen(static_cast<size_t>(spec.test), false);
  std::fill(unseen.begin(), unseen.begin() + n_unseen, true);
  draw.shuffle(unseen);
  for (int i = 0; i < spec.test; ++i)
    dataset.samples.push_back(make_story(spec, styles, Split::kTest, i, unseen[static_cast<size_t>(i)], draw));
  return dataset;
}

std::vector<LabeledFrame> render_random_frames(const SyntheticSpec& spec, int count,
                                               std::uint64_t seed) {
  const auto styles = character_styles(spec);
  const int total = static_cast<int>(styles.size());
  Draw draw(seed);
  std::vector<LabeledFrame> out;
  out.reserve(static_cast<size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) {
    Scene scene{draw.below(spec.n_backgrounds), {}};
    const int n = 1 + draw.below(3);
    std::vector<int> chars(static_cast<size_t>(total));
    for (int c = 0; c < total; ++c) chars[static_cast<size_t>(c)] = c;
    draw.shuffle(chars);
    const auto sides = random_sides(n, draw);
    LabeledFrame frame;
    for (int k = 0; k < n; ++k) {
      scene.placements.push_back({chars[static_cast<size_t>(k)], sides[static_cast<size_t>(k)],
                                  draw.unit() < 0.5 ? Action::kWalk : Action::kJump});
      frame.labels.insert(chars[static_cast<size_t>(k)]);
    }
    frame.image = render_scene(scene, spec);
    Scene ordered = scene;
    sort_placements(ordered);
    for (const auto& p : ordered.placements) {
      if (!frame.caption.empty()) frame.caption += " and ";
      frame.caption += describe(styles[static_cast<size_t>(p.character)], p, true);
    }
    out.push_back(std::move(frame));
  }
  return out;
}

}  // namespace retrostory::data
