#include "wnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "wnet/checkpoint.hpp"
#include "wnet/image_io.hpp"
#include "wnet/keyvalue.hpp"

namespace wnet {
namespace {

std::string join_numbers(std::span<const double> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_number(v[i]);
  return out;
}

std::vector<double> split_numbers(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || ptr != item.data() + item.size()) {
      throw DataError("metadata key '" + key + "' holds a malformed number list: " + text);
    }
    out.push_back(v);
  }
  return out;
}

void require_rgb(const Tensor& t, const char* what) {
  require(t.shape().n == 1 && t.shape().c == 3,
          std::string(what) + ": expected (1, 3, H, W), got " + t.shape().str());
}

// Bayer color of pixel (y, x) for RGGB: 0 R, 1 G, 2 B.
int bayer_color(int y, int x) {
  if ((y & 1) == 0) return (x & 1) == 0 ? 0 : 1;
  return (x & 1) == 0 ? 1 : 2;
}

std::string index_name(std::size_t i) {
  std::string s = std::to_string(i);
  return std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

}  // namespace

RawMode raw_mode_for_channels(int in_channels) {
  if (in_channels == 1) return RawMode::mosaic;
  if (in_channels == 4) return RawMode::packed;
  throw ContractError("raw input must have 1 (mosaic) or 4 (packed) channels, got " +
                      std::to_string(in_channels));
}

int raw_channels(RawMode mode) { return mode == RawMode::mosaic ? 1 : 4; }

double SyntheticISPParams::ccm_determinant() const {
  const auto& m = ccm;
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

void SyntheticISPParams::validate() const {
  for (double g : wb_gains) require(g > 0.0, "white-balance gains must be positive");
  require(std::abs(ccm_determinant()) > 1e-6, "color matrix is not invertible (|det| <= 1e-6)");
  require(gamma > 0.0, "gamma must be positive");
  require(noise_sigma >= 0.0, "noise sigma must be non-negative");
  require(std::abs(dx) <= kMaxShift && std::abs(dy) <= kMaxShift, "misalignment shift exceeds 4 px");
  require(std::abs(theta_deg) <= kMaxRotationDeg, "misalignment rotation exceeds 1 degree");
}

std::map<std::string, std::string> SyntheticISPParams::to_metadata(const std::string& prefix) const {
  return {
      {prefix + ".wb_gains", join_numbers(wb_gains)},
      {prefix + ".ccm", join_numbers(ccm)},
      {prefix + ".gamma", format_number(gamma)},
      {prefix + ".noise_sigma", format_number(noise_sigma)},
      {prefix + ".dx", format_number(dx)},
      {prefix + ".dy", format_number(dy)},
      {prefix + ".theta_deg", format_number(theta_deg)},
  };
}

void SynthRanges::validate() const {
  require(0.0 < red_gain_min && red_gain_min <= red_gain_max, "red gain range must be positive and ordered");
  require(0.0 < blue_gain_min && blue_gain_min <= blue_gain_max,
          "blue gain range must be positive and ordered");
  require(ccm_jitter >= 0.0 && ccm_jitter < 0.3, "ccm jitter must lie in [0, 0.3)");
  require(0.0 < gamma_min && gamma_min <= gamma_max, "gamma range must be positive and ordered");
  require(noise_sigma >= 0.0, "noise sigma must be non-negative");
  require(max_shift >= 0.0 && max_shift <= SyntheticISPParams::kMaxShift, "max shift must lie in [0, 4]");
  require(max_rotation_deg >= 0.0 && max_rotation_deg <= SyntheticISPParams::kMaxRotationDeg,
          "max rotation must lie in [0, 1] degrees");
}

std::map<std::string, std::string> SynthRanges::to_metadata() const {
  return {
      {"synth.red_gain_min", format_number(red_gain_min)},
      {"synth.red_gain_max", format_number(red_gain_max)},
      {"synth.blue_gain_min", format_number(blue_gain_min)},
      {"synth.blue_gain_max", format_number(blue_gain_max)},
      {"synth.ccm_jitter", format_number(ccm_jitter)},
      {"synth.gamma_min", format_number(gamma_min)},
      {"synth.gamma_max", format_number(gamma_max)},
      {"synth.noise_sigma", format_number(noise_sigma)},
      {"synth.max_shift", format_number(max_shift)},
      {"synth.max_rotation_deg", format_number(max_rotation_deg)},
  };
}

SyntheticISPParams sample_camera(const SynthRanges& r, Rng& rng) {
  r.validate();
  SyntheticISPParams p;
  p.wb_gains = {rng.uniform(r.red_gain_min, r.red_gain_max), 1.0,
                rng.uniform(r.blue_gain_min, r.blue_gain_max)};
  // Identity plus off-diagonal jitter, each row rescaled to sum to one.
  for (int i = 0; i < 3; ++i) {
    double row = 0.0;
    for (int j = 0; j < 3; ++j) {
      const double v = i == j ? 1.0 : rng.uniform(-r.ccm_jitter, r.ccm_jitter);
      p.ccm[i * 3 + j] = v;
      row += v;
    }
    for (int j = 0; j < 3; ++j) p.ccm[i * 3 + j] /= row;
  }
  p.gamma = rng.uniform(r.gamma_min, r.gamma_max);
  p.noise_sigma = r.noise_sigma;
  p.validate();
  return p;
}

void sample_misalignment(SyntheticISPParams& p, const SynthRanges& r, Rng& rng) {
  p.dx = rng.uniform(-r.max_shift, r.max_shift);
  p.dy = rng.uniform(-r.max_shift, r.max_shift);
  p.theta_deg = rng.uniform(-r.max_rotation_deg, r.max_rotation_deg);
}

Tensor procedural_clean(int height, int width, Rng& rng) {
  require(height > 0 && width > 0, "procedural_clean: size must be positive");
  Tensor img({1, 3, height, width});
  std::array<double, 3> c0{}, c1{};
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.05, 0.55);
    c1[c] = rng.uniform(0.05, 0.55);
  }
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double ux = std::cos(angle), uy = std::sin(angle);
  const double span = std::abs(ux) * (width - 1) + std::abs(uy) * (height - 1) + 1e-9;
  const double base = std::min(0.0, ux * (width - 1)) + std::min(0.0, uy * (height - 1));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double t = (ux * x + uy * y - base) / span;
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = static_cast<float>(c0[c] + (c1[c] - c0[c]) * t);
    }
  }

  // Ellipses alpha-blended in drawing order. Edges ramp over kEdgeWidth
  // pixels, standing in for the optical low-pass in front of a real sensor.
  constexpr double kEdgeWidth = 3.0;
  const int count = 3 + static_cast<int>(rng.below(5));
  const double scale = std::min(height, width);
  for (int e = 0; e < count; ++e) {
    const double cx = rng.uniform(0.0, width - 1.0), cy = rng.uniform(0.0, height - 1.0);
    const double ax = rng.uniform(0.08, 0.35) * scale, ay = rng.uniform(0.08, 0.35) * scale;
    const double rot = rng.uniform(0.0, std::numbers::pi);
    const double alpha = rng.uniform(0.6, 1.0);
    std::array<double, 3> color{};
    for (auto& v : color) v = rng.uniform(0.02, 0.6);
    const double cr = std::cos(rot), sr = std::sin(rot);
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const double px = x - cx, py = y - cy;
        const double u = (cr * px + sr * py) / ax, v = (-sr * px + cr * py) / ay;
        const double r = std::sqrt(u * u + v * v);
        // Signed distance to the boundary in pixels, approximately.
        const double d = (1.0 - r) * std::min(ax, ay);
        const double cover = std::clamp(d / kEdgeWidth + 0.5, 0.0, 1.0) * alpha;
        if (cover <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          float& dst = img.at(0, c, y, x);
          dst = static_cast<float>(dst * (1.0 - cover) + color[c] * cover);
        }
      }
    }
  }
  for (auto& v : img.data()) v = std::clamp(v, 0.02f, 0.6f);
  return img;
}

Tensor render_display(const Tensor& linear, const SyntheticISPParams& p) {
  require_rgb(linear, "render_display");
  p.validate();
  const Shape s = linear.shape();
  Tensor out(s);
  const double inv_gamma = 1.0 / p.gamma;
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      double wb[3];
      for (int c = 0; c < 3; ++c) wb[c] = p.wb_gains[c] * linear.at(0, c, y, x);
      for (int i = 0; i < 3; ++i) {
        double v = p.ccm[i * 3] * wb[0] + p.ccm[i * 3 + 1] * wb[1] + p.ccm[i * 3 + 2] * wb[2];
        v = std::clamp(v, 0.0, 1.0);
        out.at(0, i, y, x) = static_cast<float>(p.gamma == 1.0 ? v : std::pow(v, inv_gamma));
      }
    }
  }
  return out;
}

Tensor warp(const Tensor& img, double dx, double dy, double theta_deg) {
  const Shape s = img.shape();
  if (dx == 0.0 && dy == 0.0 && theta_deg == 0.0) return img;
  const double th = theta_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double cx = (s.w - 1) / 2.0, cy = (s.h - 1) / 2.0;
  Tensor out(s);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      // Inverse map: undo the shift, then rotate by -theta about the center.
      const double qx = x - dx - cx, qy = y - dy - cy;
      const double sx = theta_deg == 0.0 ? qx + cx : ct * qx + st * qy + cx;
      const double sy = theta_deg == 0.0 ? qy + cy : -st * qx + ct * qy + cy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const int x0 = std::clamp(static_cast<int>(fx0), 0, s.w - 1);
      const int x1 = std::clamp(static_cast<int>(fx0) + 1, 0, s.w - 1);
      const int y0 = std::clamp(static_cast<int>(fy0), 0, s.h - 1);
      const int y1 = std::clamp(static_cast<int>(fy0) + 1, 0, s.h - 1);
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const double top = (1.0 - ax) * img.at(n, c, y0, x0) + ax * img.at(n, c, y0, x1);
          const double bot = (1.0 - ax) * img.at(n, c, y1, x0) + ax * img.at(n, c, y1, x1);
          out.at(n, c, y, x) = static_cast<float>((1.0 - ay) * top + ay * bot);
        }
      }
    }
  }
  return out;
}

Tensor bayer_mosaic(const Tensor& rgb) {
  require_rgb(rgb, "bayer_mosaic");
  const Shape s = rgb.shape();
  Tensor out({1, 1, s.h, s.w});
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) out.at(0, 0, y, x) = rgb.at(0, bayer_color(y, x), y, x);
  }
  return out;
}

Tensor pack_bayer(const Tensor& mosaic) {
  const Shape s = mosaic.shape();
  require(s.n == 1 && s.c == 1, "pack_bayer: expected (1, 1, H, W), got " + s.str());
  require(s.h % 2 == 0 && s.w % 2 == 0, "pack_bayer: height and width must be even, got " + s.str());
  Tensor out({1, 4, s.h / 2, s.w / 2});
  for (int y = 0; y < s.h / 2; ++y) {
    for (int x = 0; x < s.w / 2; ++x) {
      out.at(0, 0, y, x) = mosaic.at(0, 0, 2 * y, 2 * x);
      out.at(0, 1, y, x) = mosaic.at(0, 0, 2 * y, 2 * x + 1);
      out.at(0, 2, y, x) = mosaic.at(0, 0, 2 * y + 1, 2 * x);
      out.at(0, 3, y, x) = mosaic.at(0, 0, 2 * y + 1, 2 * x + 1);
    }
  }
  return out;
}

Tensor unpack_bayer(const Tensor& packed) {
  const Shape s = packed.shape();
  require(s.n == 1 && s.c == 4, "unpack_bayer: expected (1, 4, H, W), got " + s.str());
  Tensor out({1, 1, s.h * 2, s.w * 2});
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      out.at(0, 0, 2 * y, 2 * x) = packed.at(0, 0, y, x);
      out.at(0, 0, 2 * y, 2 * x + 1) = packed.at(0, 1, y, x);
      out.at(0, 0, 2 * y + 1, 2 * x) = packed.at(0, 2, y, x);
      out.at(0, 0, 2 * y + 1, 2 * x + 1) = packed.at(0, 3, y, x);
    }
  }
  return out;
}

Tensor to_mosaic(const Tensor& raw) {
  if (raw.shape().c == 4) return unpack_bayer(raw);
  require(raw.shape().n == 1 && raw.shape().c == 1,
          "raw image must be (1, 1, H, W) or (1, 4, H, W), got " + raw.shape().str());
  return raw;
}

Tensor demosaic_bilinear(const Tensor& mosaic) {
  const Shape s = mosaic.shape();
  require(s.n == 1 && s.c == 1, "demosaic_bilinear: expected (1, 1, H, W), got " + s.str());
  Tensor out({1, 3, s.h, s.w});
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) {
      const int own = bayer_color(y, x);
      double sum[3] = {0, 0, 0};
      int count[3] = {0, 0, 0};
      for (int oy = -1; oy <= 1; ++oy) {
        for (int ox = -1; ox <= 1; ++ox) {
          const int yy = y + oy, xx = x + ox;
          if (yy < 0 || yy >= s.h || xx < 0 || xx >= s.w) continue;
          const int c = bayer_color(yy, xx);
          // Green at a red or blue site averages the 4-neighbourhood only.
          if (c == 1 && own != 1 && oy != 0 && ox != 0) continue;
          sum[c] += mosaic.at(0, 0, yy, xx);
          ++count[c];
        }
      }
      for (int c = 0; c < 3; ++c) {
        out.at(0, c, y, x) =
            c == own ? mosaic.at(0, 0, y, x) : static_cast<float>(count[c] ? sum[c] / count[c] : 0.0);
      }
    }
  }
  return out;
}

PairedSample synth_pair(const Tensor& clean, const SyntheticISPParams& params, std::uint64_t seed,
                        RawMode mode) {
  require_rgb(clean, "synth_pair");
  params.validate();
  for (float v : clean.data()) require(v >= 0.0f && v <= 1.0f, "synth_pair: clean image must lie in [0, 1]");
  if (mode == RawMode::packed) {
    require(clean.shape().h % 2 == 0 && clean.shape().w % 2 == 0, "synth_pair: packed mode needs even sizes");
  }

  PairedSample out;
  out.target = warp(render_display(clean, params), params.dx, params.dy, params.theta_deg);
  for (auto& v : out.target.data()) v = std::clamp(v, 0.0f, 1.0f);

  Tensor mosaic = bayer_mosaic(clean);
  if (params.noise_sigma > 0.0) {
    Rng rng = Rng::stream(seed, "sensor-noise");
    for (auto& v : mosaic.data()) {
      v = std::clamp(static_cast<float>(v + params.noise_sigma * rng.normal()), 0.0f, 1.0f);
    }
  }
  out.raw = mode == RawMode::packed ? pack_bayer(mosaic) : mosaic;
  out.params = params;
  out.source = "synthetic seed " + std::to_string(seed);
  return out;
}

std::map<std::string, std::string> SynthConfig::to_metadata() const {
  auto meta = ranges.to_metadata();
  meta["synth.count"] = std::to_string(count);
  meta["synth.height"] = std::to_string(height);
  meta["synth.width"] = std::to_string(width);
  meta["synth.mode"] = mode == RawMode::packed ? "packed" : "mosaic";
  meta["synth.seed"] = std::to_string(seed);
  return meta;
}

Dataset synth_dataset(const SynthConfig& cfg) {
  require(cfg.count >= 1, "synthetic dataset needs at least one sample");
  require(cfg.height >= 2 && cfg.width >= 2, "synthetic images must be at least 2x2");
  cfg.ranges.validate();
  Rng camera_rng = Rng::stream(cfg.seed, "camera");
  const SyntheticISPParams camera = sample_camera(cfg.ranges, camera_rng);
  Dataset out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    const std::uint64_t sample_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng rng = Rng::stream(sample_seed, "scene");
    const Tensor clean = procedural_clean(cfg.height, cfg.width, rng);
    SyntheticISPParams p = camera;
    Rng jitter = Rng::stream(sample_seed, "misalignment");
    sample_misalignment(p, cfg.ranges, jitter);
    PairedSample s = synth_pair(clean, p, sample_seed, cfg.mode);
    s.source = "synthetic " + index_name(static_cast<std::size_t>(i));
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir / "raw");
  std::filesystem::create_directories(dir / "rgb");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name = index_name(i) + ".png";
    write_png(dir / "raw" / name, tensor_to_png(to_mosaic(data[i].raw), 16));
    write_png(dir / "rgb" / name, tensor_to_png(data[i].target, 8));
  }
}

SplitSpec SplitSpec::parse(const std::string& text) {
  const auto slash = text.find('/');
  SplitSpec s;
  auto parse_count = [&](std::string_view part, std::size_t& out) {
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    return ec == std::errc() && ptr == part.data() + part.size() && !part.empty();
  };
  const std::string_view view(text);
  if (slash == std::string::npos || !parse_count(view.substr(0, slash), s.train) ||
      !parse_count(view.substr(slash + 1), s.val)) {
    throw ContractError("split must look like TRAIN/VAL (e.g. 8/2), got '" + text + "'");
  }
  return s;
}

Dataset load_pairs(const std::filesystem::path& dir, RawMode mode) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory " + dir.string() + " does not exist");
  auto indices = [&](const fs::path& sub) {
    std::map<std::size_t, fs::path> found;
    if (!fs::is_directory(sub)) return found;
    for (const auto& entry : fs::directory_iterator(sub)) {
      if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
      const std::string stem = entry.path().stem().string();
      std::size_t idx = 0;
      const auto [ptr, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), idx);
      if (ec != std::errc() || ptr != stem.data() + stem.size()) continue;
      found[idx] = entry.path();
    }
    return found;
  };
  const auto raws = indices(dir / "raw");
  const auto rgbs = indices(dir / "rgb");
  if (raws.empty() && rgbs.empty()) throw DataError("no pairs found in " + dir.string());
  for (const auto& [idx, path] : rgbs) {
    if (!raws.count(idx))
      throw DataError("pair " + index_name(idx) + ": raw image missing for " + path.string());
  }

  Dataset out;
  for (const auto& [idx, raw_path] : raws) {
    const std::string id = "pair " + index_name(idx);
    const auto rgb_it = rgbs.find(idx);
    if (rgb_it == rgbs.end()) throw DataError(id + ": rgb image missing for " + raw_path.string());
    PngImage raw_png, rgb_png;
    try {
      raw_png = read_png(raw_path);
      rgb_png = read_png(rgb_it->second);
    } catch (const ImageIOError& e) {
      throw DataError(id + ": " + e.what());
    }
    if (raw_png.channels != 1) throw DataError(id + ": raw image must be single-channel grayscale");
    if (rgb_png.channels != 3) throw DataError(id + ": rgb image must have 3 channels");
    if (raw_png.width != rgb_png.width || raw_png.height != rgb_png.height) {
      throw DataError(id + ": size mismatch, raw " + std::to_string(raw_png.width) + "x" +
                      std::to_string(raw_png.height) + " vs rgb " + std::to_string(rgb_png.width) + "x" +
                      std::to_string(rgb_png.height));
    }
    PairedSample s;
    s.raw = png_to_tensor(raw_png);
    if (mode == RawMode::packed) {
      if (raw_png.width % 2 || raw_png.height % 2) throw DataError(id + ": packed mode needs even sizes");
      s.raw = pack_bayer(s.raw);
    }
    s.target = png_to_tensor(rgb_png);
    s.source = raw_path.string();
    out.push_back(std::move(s));
  }
  return out;
}

DatasetSplits load_dataset(const std::filesystem::path& dir, const SplitSpec& split, RawMode mode) {
  Dataset all = load_pairs(dir, mode);
  if (split.train + split.val > all.size()) {
    throw DataError("split " + std::to_string(split.train) + "/" + std::to_string(split.val) + " needs " +
                    std::to_string(split.train + split.val) + " pairs, " + dir.string() + " has " +
                    std::to_string(all.size()));
  }
  DatasetSplits out;
  const auto mid = all.begin() + static_cast<std::ptrdiff_t>(split.train);
  out.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(mid));
  out.val.assign(std::make_move_iterator(mid),
                 std::make_move_iterator(mid + static_cast<std::ptrdiff_t>(split.val)));
  return out;
}

namespace {

void channel_stats(const Dataset& data, bool input, std::vector<double>& mean, std::vector<double>& stddev) {
  const Tensor& first = input ? data.front().raw : data.front().target;
  const int channels = first.shape().c;
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> count(static_cast<std::size_t>(channels), 0.0);
  for (const auto& s : data) {
    const Tensor& t = input ? s.raw : s.target;
    require(t.shape().c == channels, "all samples must have the same channel count");
    for (int c = 0; c < channels; ++c) {
      const float* p = t.plane(0, c);
      for (std::size_t i = 0; i < t.shape().plane(); ++i) sum[c] += p[i];
      count[c] += static_cast<double>(t.shape().plane());
    }
  }
  mean.assign(static_cast<std::size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) mean[c] = sum[c] / count[c];
  // Second pass about the mean keeps the variance free of cancellation.
  std::vector<double> sq(static_cast<std::size_t>(channels), 0.0);
  for (const auto& s : data) {
    const Tensor& t = input ? s.raw : s.target;
    for (int c = 0; c < channels; ++c) {
      const float* p = t.plane(0, c);
      for (std::size_t i = 0; i < t.shape().plane(); ++i) sq[c] += (p[i] - mean[c]) * (p[i] - mean[c]);
    }
  }
  stddev.assign(static_cast<std::size_t>(channels), 0.0);
  for (int c = 0; c < channels; ++c) {
    stddev[c] = std::sqrt(sq[c] / count[c]);
    if (!(stddev[c] > 1e-12)) {
      throw DataError(std::string(input ? "input" : "target") + " channel " + std::to_string(c) +
                      " has zero variance; cannot normalize degenerate data");
    }
  }
}

}  // namespace

NormStats NormStats::compute(const Dataset& data) {
  if (data.empty()) throw DataError("cannot compute normalization statistics of an empty dataset");
  NormStats s;
  channel_stats(data, true, s.input_mean, s.input_std);
  channel_stats(data, false, s.target_mean, s.target_std);
  return s;
}

Tensor normalize(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& std) {
  const Shape s = x.shape();
  require(static_cast<std::size_t>(s.c) == mean.size() && mean.size() == std.size(),
          "normalize: statistics have " + std::to_string(mean.size()) + " channels, tensor " + s.str());
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* src = x.plane(n, c);
      float* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = static_cast<float>((src[i] - mean[c]) / std[c]);
    }
  }
  return out;
}

Tensor denormalize(const Tensor& x, const std::vector<double>& mean, const std::vector<double>& std) {
  const Shape s = x.shape();
  require(static_cast<std::size_t>(s.c) == mean.size() && mean.size() == std.size(),
          "denormalize: statistics have " + std::to_string(mean.size()) + " channels, tensor " + s.str());
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* src = x.plane(n, c);
      float* dst = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = static_cast<float>(src[i] * std[c] + mean[c]);
    }
  }
  return out;
}

Tensor NormStats::normalize_input(const Tensor& x) const { return normalize(x, input_mean, input_std); }
Tensor NormStats::denormalize_input(const Tensor& x) const { return denormalize(x, input_mean, input_std); }
Tensor NormStats::normalize_target(const Tensor& x) const { return normalize(x, target_mean, target_std); }
Tensor NormStats::denormalize_target(const Tensor& x) const {
  return denormalize(x, target_mean, target_std);
}

DisplayMap NormStats::target_display() const { return DisplayMap{target_std, target_mean}; }

std::map<std::string, std::string> NormStats::to_metadata() const {
  return {
      {"norm.input_mean", join_numbers(input_mean)},
      {"norm.input_std", join_numbers(input_std)},
      {"norm.target_mean", join_numbers(target_mean)},
      {"norm.target_std", join_numbers(target_std)},
  };
}

NormStats NormStats::from_metadata(const std::map<std::string, std::string>& meta) {
  auto get = [&](const std::string& key) {
    const auto it = meta.find(key);
    if (it == meta.end()) throw DataError("metadata lacks normalization key '" + key + "'");
    return split_numbers(it->second, key);
  };
  NormStats s;
  s.input_mean = get("norm.input_mean");
  s.input_std = get("norm.input_std");
  s.target_mean = get("norm.target_mean");
  s.target_std = get("norm.target_std");
  if (s.input_mean.size() != s.input_std.size() || s.target_mean.size() != 3 || s.target_std.size() != 3) {
    throw DataError("normalization metadata has inconsistent channel counts");
  }
  return s;
}

BatchIterator::BatchIterator(std::size_t size, std::size_t batch_size, std::uint64_t seed)
    : size_(size), batch_size_(batch_size), seed_(seed) {
  require(batch_size >= 1, "batch size must be at least 1");
}

std::size_t BatchIterator::batches_per_epoch() const { return (size_ + batch_size_ - 1) / batch_size_; }

std::vector<std::vector<std::size_t>> BatchIterator::epoch(std::size_t index) const {
  std::vector<std::size_t> order(size_);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed_, index));
  for (std::size_t i = size_; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < size_; b += batch_size_) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(size_, b + batch_size_)));
  }
  return batches;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  require(!indices.empty(), "make_batch: empty index list");
  std::vector<Tensor> raws, targets;
  for (std::size_t i : indices) {
    require(i < data.size(), "make_batch: index out of range");
    raws.push_back(data[i].raw);
    targets.push_back(data[i].target);
  }
  return {stack_batch<float>(raws), stack_batch<float>(targets)};
}

}  // namespace wnet
