#include "featft/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "featft/rng.hpp"

namespace featft {

std::string split_name(Split s) { return s == Split::train ? "train" : "heldout"; }

std::vector<int> Dataset::indices(Split split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

namespace {

constexpr const char* kShapes[] = {"disk", "square", "triangle", "plus", "ring"};
constexpr const char* kFamilies[] = {"warm", "cool"};

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h_deg, double s, double v) {
  double h = std::fmod(h_deg, 360.0);
  if (h < 0) h += 360.0;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h / 60.0)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  return {r + m, g + m, b + m};
}

// Membership of a point given in shape-local coordinates scaled so the shape spans [-1, 1].
bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 2: return v >= -0.5 && v <= 1.0 - std::sqrt(3.0) * std::abs(u);
    case 3: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
    default: {
      const double d = u * u + v * v;
      return d <= 1.0 && d >= 0.55 * 0.55;
    }
  }
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

Image draw_sample(int label, int size, Rng& rng) {
  const int shape = label / 2;
  const bool warm = label % 2 == 0;

  // background: tinted grey with a linear gradient
  const double base = 0.3 + 0.4 * rng.uniform();
  const double tint[3] = {0.06 * (rng.uniform() - 0.5), 0.06 * (rng.uniform() - 0.5), 0.06 * (rng.uniform() - 0.5)};
  const double grad_angle = 2.0 * std::numbers::pi * rng.uniform();
  const double grad_amp = 0.15 * rng.uniform();

  const double radius = size * (0.2 + 0.12 * rng.uniform());
  const double cx = radius + (size - 2.0 * radius) * rng.uniform();
  const double cy = radius + (size - 2.0 * radius) * rng.uniform();
  const double theta = 2.0 * std::numbers::pi * rng.uniform();
  // foreground: the background shifted in brightness plus a faint chroma of the colour family
  const double hue = warm ? -25.0 + 80.0 * rng.uniform() : 165.0 + 90.0 * rng.uniform();
  const Rgb pure = hsv_to_rgb(hue, 1.0, 1.0);
  const double lum = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.08 + 0.1 * rng.uniform());
  const double chroma = 0.15 + 0.15 * rng.uniform();
  const double shift[3] = {lum + chroma * (pure.r - 0.5), lum + chroma * (pure.g - 0.5), lum + chroma * (pure.b - 0.5)};
  const double noise = 0.03 + 0.04 * rng.uniform();

  const double ct = std::cos(theta), st = std::sin(theta);
  Image img({3, size, size});
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx - cx;
          const double py = y + 0.25 + 0.5 * sy - cy;
          const double u = (ct * px + st * py) / radius;
          const double v = (-st * px + ct * py) / radius;
          hits += inside(shape, u, v) ? 1 : 0;
        }
      }
      const double cover = hits / 4.0;
      const double ramp = grad_amp * ((x / double(size) - 0.5) * std::cos(grad_angle) + (y / double(size) - 0.5) * std::sin(grad_angle));
            for (int c = 0; c < 3; ++c) {
        const double bg = base + tint[c] + ramp;
        img.at(c, y, x) = quantize(bg + shift[c] * cover + noise * rng.normal());
      }
    }
  }
  return img;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

}  // namespace

std::string class_name(int label) {
  if (label < 0 || label >= 10) return "class" + std::to_string(label);
  return std::string(kShapes[label / 2]) + "_" + kFamilies[label % 2];
}

Dataset gen_synthetic_dataset(const SyntheticOptions& options) {
  if (options.per_class < 1) throw ConfigError("per_class must be at least 1");
  if (options.heldout_fraction < 0.0 || options.heldout_fraction >= 1.0) {
    throw ConfigError("heldout_fraction must lie in [0, 1)");
  }
  Dataset ds;
  ds.class_count = 10;
  const int n_train = options.per_class - static_cast<int>(std::lround(options.per_class * options.heldout_fraction));
  for (int i = 0; i < options.per_class; ++i) {
    for (int label = 0; label < ds.class_count; ++label) {
      const auto index = static_cast<std::uint64_t>(i) * 10 + static_cast<std::uint64_t>(label);
      Rng rng(stream_seed(options.seed, index, "synthetic-sample"));
      char id[32];
      std::snprintf(id, sizeof id, "c%d_%05d", label, i);
      ds.samples.push_back({id, draw_sample(label, options.image_size, rng), label,
                            i < n_train ? Split::train : Split::heldout});
    }
  }
  return ds;
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ConfigError("PPM export needs a 3×H×W image");
  const int h = image.dim(1), w = image.dim(2);
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + static_cast<std::size_t>(3 * h * w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
    }
  }
  return out;
}

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t at = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == at || v <= 0 || v > 65535) throw FormatError(std::string("PPM: bad ") + what, at);
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("PPM: expected P6 magic", 0);
  pos = 2;
  const int w = read_int("width");
  const int h = read_int("height");
  const std::size_t maxval_at = pos;
  if (read_int("maxval") != 255) throw FormatError("PPM: only maxval 255 is supported", maxval_at);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("PPM: missing header terminator", pos);
  ++pos;
  const std::size_t need = static_cast<std::size_t>(3 * w * h);
  if (bytes.size() - pos < need) throw FormatError("PPM: truncated pixel data", bytes.size());
  Image img({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(bytes[pos++]) / 255.0f;
    }
  }
  return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(image);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  std::ofstream labels(root / "labels.csv");
  if (!labels) throw IoError("cannot write " + (root / "labels.csv").string());
  labels << "id,split,label,path\n";
  for (const Sample& s : dataset.samples) {
    const std::string rel = split_name(s.split) + "/" + std::to_string(s.label) + "/" + s.id + ".ppm";
    write_ppm(s.image, root / rel);
    labels << s.id << ',' << split_name(s.split) << ',' << s.label << ',' << rel << '\n';
  }
  if (!labels) throw IoError("failed writing labels.csv");
}

Dataset load_dataset(const std::filesystem::path& root) {
  std::ifstream labels(root / "labels.csv");
  if (!labels) throw IoError("cannot read " + (root / "labels.csv").string());
  Dataset ds;
  std::string line;
  std::getline(labels, line);
  if (trim(line) != "id,split,label,path") throw FormatError("labels.csv: unexpected header", 0);
  std::uint64_t offset = line.size() + 1;
  while (std::getline(labels, line)) {
    const std::uint64_t at = offset;
    offset += line.size() + 1;
    if (trim(line).empty()) continue;
    std::stringstream ss(trim(line));
    std::string id, split, label, rel;
    if (!std::getline(ss, id, ',') || !std::getline(ss, split, ',') || !std::getline(ss, label, ',') ||
        !std::getline(ss, rel)) {
      throw FormatError("labels.csv: malformed line", at);
    }
    if (split != "train" && split != "heldout") throw FormatError("labels.csv: unknown split '" + split + "'", at);
    if (label.empty() || label.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("labels.csv: bad label '" + label + "'", at);
    }
    Sample s{id, read_ppm(root / rel), std::stoi(label), split == "train" ? Split::train : Split::heldout};
    ds.class_count = std::max(ds.class_count, s.label + 1);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void select_attack_eval(Dataset& dataset, const std::vector<const Model*>& models) {
  dataset.attack_eval.clear();
  for (const int i : dataset.indices(Split::heldout)) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
    const bool agreed = std::all_of(models.begin(), models.end(), [&](const Model* m) { return predict(*m, s.image) == s.label; });
    if (agreed) dataset.attack_eval.push_back(i);
  }
}

double accuracy(const Model& model, const Dataset& dataset, Split split) {
  const auto idx = dataset.indices(split);
  if (idx.empty()) return 0.0;
  int correct = 0;
  for (const int i : idx) {
    const Sample& s = dataset.samples[static_cast<std::size_t>(i)];
    correct += predict(model, s.image) == s.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

}  // namespace featft
