#include "lcae/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace lcae::data {

namespace {

// Skips whitespace and '#' comment lines inside a PNM header.
int next_header_int(std::istream& in, const std::string& path) {
  while (true) {
    const int c = in.peek();
    if (c == EOF) throw InputError("pgm: truncated header in " + path);
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    break;
  }
  int value = 0;
  if (!(in >> value)) throw InputError("pgm: malformed header in " + path);
  return value;
}

}  // namespace

Image<double> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2")
    throw InputError("pgm: " + path + " is not an 8-bit grayscale PGM (magic " + magic + ")");
  const int w = next_header_int(in, path);
  const int h = next_header_int(in, path);
  const int maxval = next_header_int(in, path);
  if (w <= 0 || h <= 0) throw InputError("pgm: bad dimensions in " + path);
  if (maxval <= 0 || maxval > 255)
    throw InputError("pgm: unsupported maxval " + std::to_string(maxval) + " in " + path);

  Image<double> img(h, w);
  if (magic == "P5") {
    in.get();  // single whitespace byte after maxval
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
      throw InputError("pgm: truncated pixel data in " + path);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img(y, x) = buf[static_cast<size_t>(y) * w + x];
  } else {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int v;
        if (!(in >> v)) throw InputError("pgm: truncated pixel data in " + path);
        img(y, x) = v;
      }
    }
  }
  return img;
}

void write_pgm(const std::string& path, const Image<double>& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pgm: cannot write " + path);
  out << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
  std::vector<unsigned char> buf(static_cast<size_t>(image.size()));
  size_t i = 0;
  for (Index y = 0; y < image.rows(); ++y) {
    for (Index x = 0; x < image.cols(); ++x) {
      const double v = std::clamp(image(y, x), 0.0, 255.0);
      buf[i++] = static_cast<unsigned char>(std::floor(v + 0.5));  // round half up
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("pgm: write failure on " + path);
}

Mask read_mask(const std::string& path) {
  const Image<double> img = read_pgm(path);
  Mask m(img.rows(), img.cols());
  for (Index y = 0; y < img.rows(); ++y)
    for (Index x = 0; x < img.cols(); ++x) m(y, x) = img(y, x) > 127.0 ? 1 : 0;
  return m;
}

void write_mask(const std::string& path, const Mask& mask) {
  Image<double> img(mask.rows(), mask.cols());
  for (Index y = 0; y < mask.rows(); ++y)
    for (Index x = 0; x < mask.cols(); ++x) img(y, x) = mask(y, x) ? 255.0 : 0.0;
  write_pgm(path, img);
}

Sample load_sample(const std::string& image_path, const std::string& mask_path) {
  Sample s;
  s.image = read_pgm(image_path);
  s.mask = read_mask(mask_path);
  if (s.image.rows() != s.mask.rows() || s.image.cols() != s.mask.cols())
    throw DimensionError("load_sample: image " + std::to_string(s.image.rows()) + "x" +
                         std::to_string(s.image.cols()) + " vs mask " +
                         std::to_string(s.mask.rows()) + "x" + std::to_string(s.mask.cols()));
  s.id = fs::path(image_path).stem().string();
  return s;
}

Image<double> standardize(const Image<double>& image) {
  if (!all_finite(image)) throw InputError("standardize: non-finite pixels");
  const double mean = image.mean();
  const double var = (image.array() - mean).square().sum() / static_cast<double>(image.size());
  const double denom = std::max(std::sqrt(var), 1e-6);
  return ((image.array() - mean) / denom).matrix();
}

Sample pad_crop(const Sample& sample, int out_h, int out_w, Rng* rng) {
  const int h = static_cast<int>(sample.image.rows());
  const int w = static_cast<int>(sample.image.cols());
  const int ph = std::max(h, out_h);
  const int pw = std::max(w, out_w);
  const int pad_top = (ph - h) / 2;
  const int pad_left = (pw - w) / 2;
  const int crop_y = rng ? rng->uniform_int(0, ph - out_h) : (ph - out_h) / 2;
  const int crop_x = rng ? rng->uniform_int(0, pw - out_w) : (pw - out_w) / 2;

  Sample out;
  out.id = sample.id;
  out.image.resize(out_h, out_w);
  out.mask.resize(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::clamp(y + crop_y - pad_top, 0, h - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::clamp(x + crop_x - pad_left, 0, w - 1);
      out.image(y, x) = sample.image(sy, sx);
      out.mask(y, x) = sample.mask(sy, sx);
    }
  }
  return out;
}

Sample random_flip(const Sample& sample, Rng& rng) {
  const bool flip_h = rng.bernoulli(0.5);
  const bool flip_v = rng.bernoulli(0.5);
  Sample out = sample;
  if (flip_h) {
    out.image = out.image.rowwise().reverse().eval();
    out.mask = out.mask.rowwise().reverse().eval();
  }
  if (flip_v) {
    out.image = out.image.colwise().reverse().eval();
    out.mask = out.mask.colwise().reverse().eval();
  }
  return out;
}

void SynthSpec::validate() const {
  if (height < 8 || width < 8) throw ConfigError("synth: image must be at least 8x8");
  if (min_targets < 0 || max_targets < min_targets || max_targets > 3)
    throw ConfigError("synth: target count must satisfy 0 <= min <= max <= 3");
  if (!(amp_min > 0.0) || amp_max < amp_min) throw ConfigError("synth: bad amplitude range");
  if (!(sigma_min > 0.0) || sigma_max < sigma_min) throw ConfigError("synth: bad sigma range");
}

namespace {

// 5x5 box blur with clamped windows, applied separably.
void box_blur5(Image<double>& img) {
  const int h = static_cast<int>(img.rows());
  const int w = static_cast<int>(img.cols());
  Image<double> tmp(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      int n = 0;
      for (int k = -2; k <= 2; ++k) {
        const int sx = x + k;
        if (sx < 0 || sx >= w) continue;
        acc += img(y, sx);
        ++n;
      }
      tmp(y, x) = acc / n;
    }
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      double acc = 0.0;
      int n = 0;
      for (int k = -2; k <= 2; ++k) {
        const int sy = y + k;
        if (sy < 0 || sy >= h) continue;
        acc += tmp(sy, x);
        ++n;
      }
      img(y, x) = acc / n;
    }
  }
}

}  // namespace

Sample synth_generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int h = spec.height, w = spec.width;

  // Background: base level with a gentle planar gradient.
  const double base = rng.uniform(20.0, 60.0);
  const double slope_r = rng.uniform(-20.0, 20.0);
  const double slope_c = rng.uniform(-20.0, 20.0);
  Image<double> img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img(y, x) = base + slope_r * y / (h - 1) + slope_c * x / (w - 1);

  // Low-frequency noise: smoothed white noise.
  const double noise_sigma = rng.uniform(1.0, 3.0);
  Image<double> noise(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) noise(y, x) = rng.normal() * noise_sigma;
  box_blur5(noise);
  box_blur5(noise);
  img += noise;

  // Optional bright clutter ridges (no mask contribution).
  if (spec.clutter) {
    const int n_clutter = rng.uniform_int(0, 2);
    for (int i = 0; i < n_clutter; ++i) {
      const double cy = rng.uniform(0.0, h - 1.0);
      const double cx = rng.uniform(0.0, w - 1.0);
      const double angle = rng.uniform(0.0, 3.14159265358979323846);
      const double amp = rng.uniform(10.0, 35.0);
      const double width = rng.uniform(0.7, 1.6);
      const double nr = -std::sin(angle), nc = std::cos(angle);  // line normal
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dist = (y - cy) * nr + (x - cx) * nc;
          img(y, x) += amp * std::exp(-dist * dist / (2.0 * width * width));
        }
      }
    }
  }

  // Targets: Gaussian profiles with integer centers; the mask is the level
  // set where the target term alone reaches amp*exp(-2), i.e. radius 2*sigma.
  Mask mask = Mask::Zero(h, w);
  const int n_targets = rng.uniform_int(spec.min_targets, spec.max_targets);
  std::vector<std::pair<int, int>> centers;
  std::vector<double> sigmas;
  for (int t = 0; t < n_targets; ++t) {
    const double sigma = rng.uniform(spec.sigma_min, spec.sigma_max);
    const double amp = rng.uniform(spec.amp_min, spec.amp_max);
    const int margin = static_cast<int>(std::ceil(3.0 * sigma));
    if (2 * margin + 1 > h || 2 * margin + 1 > w)
      throw ConfigError("synth: target margin 3*sigma does not fit inside the image");
    // Prefer separated targets so ground-truth components stay distinct, but
    // only impossible margins are an error; small scenes may merge targets.
    int cy = 0, cx = 0;
    bool separated = false;
    for (int attempt = 0; attempt < 200 && !separated; ++attempt) {
      cy = rng.uniform_int(margin, h - 1 - margin);
      cx = rng.uniform_int(margin, w - 1 - margin);
      separated = true;
      for (size_t j = 0; j < centers.size(); ++j) {
        const double dy = cy - centers[j].first, dx = cx - centers[j].second;
        const double min_sep = 3.0 * (sigma + sigmas[j]) + 2.0;
        if (dy * dy + dx * dx < min_sep * min_sep) {
          separated = false;
          break;
        }
      }
    }
    centers.emplace_back(cy, cx);
    sigmas.push_back(sigma);

    const int reach = static_cast<int>(std::ceil(4.0 * sigma)) + 1;
    const double r2_mask = 4.0 * sigma * sigma;  // (2*sigma)^2
    for (int y = std::max(0, cy - reach); y <= std::min(h - 1, cy + reach); ++y) {
      for (int x = std::max(0, cx - reach); x <= std::min(w - 1, cx + reach); ++x) {
        const double r2 = static_cast<double>((y - cy) * (y - cy) + (x - cx) * (x - cx));
        img(y, x) += amp * std::exp(-r2 / (2.0 * sigma * sigma));
        if (r2 <= r2_mask) mask(y, x) = 1;
      }
    }
  }

  // Saturate like an 8-bit sensor.
  img = img.array().min(255.0).max(0.0).matrix();

  Sample s;
  s.image = std::move(img);
  s.mask = std::move(mask);
  s.id = "synth_" + std::to_string(spec.seed);
  return s;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string id, subset;
  while (in >> id >> subset) {
    ManifestEntry e;
    e.id = id;
    if (subset == "train")
      e.subset = Subset::train;
    else if (subset == "test")
      e.subset = Subset::test;
    else
      throw InputError("manifest: unknown subset '" + subset + "' in " + path);
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IoError("manifest: cannot write " + path);
  for (const auto& e : entries)
    out << e.id << " " << (e.subset == Subset::train ? "train" : "test") << "\n";
}

void write_dataset(const std::string& dir, const std::vector<Sample>& samples,
                   const std::vector<ManifestEntry>& manifest) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (!fs::is_directory(fs::path(dir) / "images") || !fs::is_directory(fs::path(dir) / "masks"))
    throw IoError("dataset: cannot create directories under " + dir);
  for (const auto& s : samples) {
    write_pgm((fs::path(dir) / "images" / (s.id + ".pgm")).string(), s.image);
    write_mask((fs::path(dir) / "masks" / (s.id + ".pgm")).string(), s.mask);
  }
  write_manifest((fs::path(dir) / "manifest.txt").string(), manifest);
}

std::vector<Sample> load_dataset(const std::string& dir, Subset subset) {
  const auto manifest = read_manifest((fs::path(dir) / "manifest.txt").string());
  std::vector<Sample> samples;
  for (const auto& e : manifest) {
    if (e.subset != subset) continue;
    Sample s = load_sample((fs::path(dir) / "images" / (e.id + ".pgm")).string(),
                           (fs::path(dir) / "masks" / (e.id + ".pgm")).string());
    s.id = e.id;
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace lcae::data
