#include "arcflow/corpus.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "arcflow/metrics.hpp"

namespace arcflow {

namespace {

const std::map<std::string, std::array<float, 3>>& palette() {
  static const std::map<std::string, std::array<float, 3>> p{
      {"red", {1.0f, 0.0f, 0.0f}},    {"green", {0.0f, 0.75f, 0.0f}}, {"blue", {0.0f, 0.0f, 1.0f}},
      {"yellow", {1.0f, 1.0f, 0.0f}}, {"cyan", {0.0f, 1.0f, 1.0f}},   {"magenta", {1.0f, 0.0f, 1.0f}},
      {"orange", {1.0f, 0.5f, 0.0f}}, {"white", {1.0f, 1.0f, 1.0f}},  {"black", {0.0f, 0.0f, 0.0f}},
      {"gray", {0.5f, 0.5f, 0.5f}},
  };
  return p;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

// Cell-grid center of a named position.
std::pair<long, long> anchor(const std::string& position, long g) {
  if (position == "left") return {g / 2, g / 4};
  if (position == "right") return {g / 2, 3 * g / 4};
  if (position == "top") return {g / 4, g / 2};
  if (position == "bottom") return {3 * g / 4, g / 2};
  if (position == "center") return {g / 2, g / 2};
  throw CorpusError("unknown position '" + position + "'");
}

bool inside(const std::string& shape, long dr, long dc, long r) {
  const long ar = std::abs(dr), ac = std::abs(dc);
  if (ar > r || ac > r) return false;
  if (shape == "square") return true;
  if (shape == "circle") return dr * dr + dc * dc <= r * r + r;
  if (shape == "diamond") return ar + ac <= r;
  if (shape == "cross") return ar <= r / 3 || ac <= r / 3;
  throw CorpusError("unknown shape '" + shape + "'");
}

// Position pairs that keep two objects apart.
const std::vector<std::pair<std::string, std::string>>& position_pairs() {
  static const std::vector<std::pair<std::string, std::string>> p{
      {"left", "right"}, {"right", "left"}, {"top", "bottom"}, {"bottom", "top"}};
  return p;
}

template <class V>
const auto& pick(const V& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

SceneObject random_object(const std::string& background, std::mt19937_64& rng) {
  SceneObject o;
  static const std::vector<std::string> sizes{"small", "large"};
  o.size = pick(sizes, rng);
  do {
    o.color = pick(object_colors(), rng);
  } while (o.color == background);
  o.shape = pick(shapes(), rng);
  o.position = pick(positions(), rng);
  return o;
}

Scene random_scene(std::size_t image_size, std::size_t max_objects, std::mt19937_64& rng) {
  Scene s;
  s.image_size = image_size;
  s.background = pick(background_colors(), rng);
  std::uniform_int_distribution<std::size_t> count(1, max_objects);
  const std::size_t n = count(rng);
  s.objects.push_back(random_object(s.background, rng));
  if (n == 2) {
    const auto& pair = pick(position_pairs(), rng);
    s.objects[0].position = pair.first;
    SceneObject b = random_object(s.background, rng);
    b.position = pair.second;
    s.objects.push_back(b);
  }
  return s;
}

// Independent per-cell brightness jitter; keeps the image cell-aligned.
Image jitter(Image img, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-0.15f, 0.15f);
  for (std::size_t r = 0; r < img.height; r += 2)
    for (std::size_t c = 0; c < img.width; c += 2) {
      const float d = u(rng);
      for (std::size_t dr = 0; dr < 2; ++dr)
        for (std::size_t dc = 0; dc < 2; ++dc)
          for (std::size_t ch = 0; ch < 3; ++ch) {
            float& v = img.at(r + dr, c + dc, ch);
            v = std::clamp(v + d, 0.0f, 1.0f);
          }
    }
  return img;
}

Segment image_segment(std::string text, const Scene& scene, bool hq, std::mt19937_64& rng) {
  Segment seg;
  seg.text = std::move(text);
  seg.image = render(scene);
  if (hq) {
    seg.scene = scene;
  } else {
    seg.image = jitter(*seg.image, rng);
  }
  return seg;
}

}  // namespace

const std::vector<std::string>& object_colors() {
  static const std::vector<std::string> c{"red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white"};
  return c;
}

const std::vector<std::string>& background_colors() {
  static const std::vector<std::string> c{"black", "gray", "white"};
  return c;
}

const std::vector<std::string>& shapes() {
  static const std::vector<std::string> s{"square", "circle", "diamond", "cross"};
  return s;
}

const std::vector<std::string>& positions() {
  static const std::vector<std::string> p{"left", "right", "top", "bottom", "center"};
  return p;
}

std::string describe(const Scene& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (i > 0) out += " and ";
    out += "a " + o.size + " " + o.color + " " + o.shape + " at " + o.position;
  }
  out += " on " + scene.background + " background";
  return out;
}

Scene parse_caption(const std::string& caption, std::size_t image_size) {
  std::istringstream in(caption);
  std::vector<std::string> w;
  for (std::string s; in >> s;) w.push_back(s);
  Scene scene;
  scene.image_size = image_size;
  std::size_t i = 0;
  auto expect = [&](const std::string& word) {
    if (i >= w.size() || w[i] != word) throw CorpusError("caption: expected '" + word + "' at word " + std::to_string(i));
    ++i;
  };
  auto one_of = [&](const std::vector<std::string>& options, const char* what) {
    if (i >= w.size() || !contains(options, w[i])) throw CorpusError(std::string("caption: expected a ") + what);
    return w[i++];
  };
  static const std::vector<std::string> sizes{"small", "large"};
  for (;;) {
    expect("a");
    SceneObject o;
    o.size = one_of(sizes, "size");
    o.color = one_of(object_colors(), "color");
    o.shape = one_of(shapes(), "shape");
    expect("at");
    o.position = one_of(positions(), "position");
    scene.objects.push_back(o);
    if (i < w.size() && w[i] == "and") {
      ++i;
      continue;
    }
    break;
  }
  expect("on");
  scene.background = one_of(background_colors(), "background");
  expect("background");
  if (i != w.size()) throw CorpusError("caption: trailing words");
  return scene;
}

Image render(const Scene& scene) {
  if (scene.image_size == 0 || scene.image_size % 16 != 0) throw CorpusError("render: image size must be a multiple of 16");
  const long g = static_cast<long>(scene.image_size / 2);
  Image img(scene.image_size, scene.image_size);
  const auto& bg = palette().at(scene.background);
  for (std::size_t p = 0; p < scene.image_size * scene.image_size; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) img.data[p * 3 + ch] = bg[ch];
  for (const auto& o : scene.objects) {
    const auto it = palette().find(o.color);
    if (it == palette().end()) throw CorpusError("render: unknown color '" + o.color + "'");
    const long radius = o.size == "small" ? g / 8 : 3 * g / 16;
    const auto [cr, cc] = anchor(o.position, g);
    for (long r = cr - radius; r <= cr + radius; ++r)
      for (long c = cc - radius; c <= cc + radius; ++c) {
        if (r < 0 || c < 0 || r >= g || c >= g || !inside(o.shape, r - cr, c - cc, radius)) continue;
        for (std::size_t dr = 0; dr < 2; ++dr)
          for (std::size_t dc = 0; dc < 2; ++dc)
            for (std::size_t ch = 0; ch < 3; ++ch)
              img.at(static_cast<std::size_t>(2 * r) + dr, static_cast<std::size_t>(2 * c) + dc, ch) = it->second[ch];
      }
  }
  return img;
}

std::vector<CorpusSample> make_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::discrete_distribution<int> category(spec.weights.begin(), spec.weights.end());
  std::bernoulli_distribution hq_draw(spec.hq_fraction);
  std::set<std::string> captions;
  std::size_t duplicates = 0;
  std::vector<CorpusSample> out;
  out.reserve(spec.size);
  while (out.size() < spec.size) {
    CorpusSample s;
    s.category = static_cast<Category>(category(rng));
    s.hq = hq_draw(rng);
    const std::size_t size = pick(spec.image_sizes, rng);
    Scene scene = random_scene(size, spec.max_objects, rng);
    switch (s.category) {
      case Category::kTextOnly:
        s.hq = true;
        s.segments.push_back({"the picture is " + describe(scene), std::nullopt, std::nullopt});
        break;
      case Category::kImageText: {
        const std::string caption = describe(scene);
        if (!captions.insert(caption).second) {
          if (++duplicates > 100 * (spec.size + 1)) throw CorpusError("make_corpus: caption space exhausted");
          continue;
        }
        s.segments.push_back(image_segment(caption, scene, s.hq, rng));
        break;
      }
      case Category::kImageToImage: {
        scene.objects.resize(1);
        Scene target = scene;
        std::string instruction;
        std::bernoulli_distribution recolor(0.5);
        if (recolor(rng)) {
          do {
            target.objects[0].color = pick(object_colors(), rng);
          } while (target.objects[0].color == scene.objects[0].color || target.objects[0].color == scene.background);
          instruction = "make it " + target.objects[0].color;
        } else {
          do {
            target.objects[0].position = pick(positions(), rng);
          } while (target.objects[0].position == scene.objects[0].position);
          instruction = "move it to " + target.objects[0].position;
        }
        s.segments.push_back(image_segment("", scene, s.hq, rng));
        s.segments.push_back(image_segment(instruction, target, s.hq, rng));
        break;
      }
      case Category::kInterleaved: {
        scene.objects.resize(1);
        Scene second = scene;
        do {
          second.objects[0].position = pick(positions(), rng);
        } while (second.objects[0].position == scene.objects[0].position);
        s.segments.push_back(image_segment(describe(scene), scene, s.hq, rng));
        s.segments.push_back(image_segment("then " + describe(second), second, s.hq, rng));
        break;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Image> corpus_images(const std::vector<CorpusSample>& corpus) {
  std::vector<Image> out;
  for (const auto& s : corpus)
    for (const auto& seg : s.segments)
      if (seg.image) out.push_back(*seg.image);
  return out;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<CorpusSample>& corpus) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream index(dir / "index.tsv");
  if (!index) throw CorpusError("cannot write " + (dir / "index.tsv").string());
  index << "sample\tcategory\thq\tsegment\ttext\timage\n";
  char name[64];
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    for (std::size_t k = 0; k < s.segments.size(); ++k) {
      const auto& seg = s.segments[k];
      std::string file;
      if (seg.image) {
        std::snprintf(name, sizeof name, "images/%05zu_%zu.ppm", i, k);
        file = name;
        write_ppm(dir / file, quantize_8bit(*seg.image));
      }
      index << i << '\t' << category_name(s.category) << '\t' << (s.hq ? 1 : 0) << '\t' << k << '\t' << seg.text << '\t'
            << file << '\n';
    }
  }
}

}  // namespace arcflow
