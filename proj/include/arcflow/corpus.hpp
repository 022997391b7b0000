#pragma once

// Synthetic corpus over a small scene grammar:
//   caption := object [ "and" object ] "on" background "background"
//   object  := "a" size color shape "at" position
// Scenes are drawn on a grid of 2x2-pixel cells, so the patch tokenizer's
// block-mean channels represent them without loss.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcflow/config.hpp"
#include "arcflow/latent.hpp"
#include "arcflow/vocab.hpp"

namespace arcflow {

struct CorpusError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct SceneObject {
  std::string size;      // small | large
  std::string color;
  std::string shape;     // square | circle | diamond | cross
  std::string position;  // left | right | top | bottom | center
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::size_t image_size = 32;
  std::string background = "black";
  std::vector<SceneObject> objects;
  bool operator==(const Scene&) const = default;
};

const std::vector<std::string>& object_colors();
const std::vector<std::string>& background_colors();
const std::vector<std::string>& shapes();
const std::vector<std::string>& positions();

std::string describe(const Scene& scene);
/// Inverse of describe(); throws CorpusError on text outside the grammar.
Scene parse_caption(const std::string& caption, std::size_t image_size);
Image render(const Scene& scene);

/// Text followed (optionally) by an image. A sample is a list of these.
struct Segment {
  std::string text;
  std::optional<Image> image;
  std::optional<Scene> scene;  // scene drawn in `image`, when exact
  bool operator==(const Segment&) const = default;
};

struct CorpusSample {
  Category category = Category::kImageText;
  bool hq = true;  // image exactly matches its caption
  std::vector<Segment> segments;
  bool operator==(const CorpusSample&) const = default;
};

/// Deterministic in spec.seed. Image-text captions are unique within a
/// corpus. Non-hq samples carry cell-level color jitter, so their caption is
/// only approximately right.
std::vector<CorpusSample> make_corpus(const CorpusSpec& spec);

/// Images of every segment, in sample order.
std::vector<Image> corpus_images(const std::vector<CorpusSample>& corpus);

/// `index.tsv` (sample, category, hq, segment, text, image file) plus
/// `images/NNNNN_S.ppm`.
void write_corpus(const std::filesystem::path& dir, const std::vector<CorpusSample>& corpus);

}  // namespace arcflow
