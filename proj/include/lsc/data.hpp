#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsc/config.hpp"
#include "lsc/rng.hpp"
#include "lsc/tensor.hpp"

namespace lsc {

// raised when the attribute oracle finds no foreground to measure
class unmeasurable_error : public error {
 public:
  explicit unmeasurable_error(const std::string& what) : error(what) {}
};

inline int attribute_to_domain(double a, int n_domains) {
  LSC_CHECK(a >= 0.0 && a < 1.0, "attribute_to_domain: attribute " << a << " outside [0,1)");
  int t = static_cast<int>(std::floor(a * n_domains)) + 1;
  if (t > n_domains) t = n_domains;  // float edge at a*N rounding up to N
  return t;
}

template <class R>
struct SyntheticSample {
  Tensor<R> image;  // (C,H,W) in [-1,1]
  double attribute = 0;
  int domain = 1;
  std::uint64_t nuisance_seed = 0;
};

namespace detail {

struct Nuisance {
  double bg;
  double fg[3];
  double cx, cy;
};

inline Nuisance draw_nuisance(const DatasetConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Nuisance n;
  n.bg = rng.uniform(cfg.bg_lo, cfg.bg_hi);
  for (int c = 0; c < 3; ++c) n.fg[c] = rng.uniform(cfg.fg_lo, cfg.fg_hi);
  const double half = (cfg.image_size - 1) * 0.5;
  n.cx = half + rng.uniform(-cfg.jitter_px, cfg.jitter_px);
  n.cy = half + rng.uniform(-cfg.jitter_px, cfg.jitter_px);
  return n;
}

}  // namespace detail

// Renders one sample. Pure function of (config, attribute, seed); pixels are
// computed in double and stored as R.
template <class R>
SyntheticSample<R> make_sample(const DatasetConfig& cfg, double a, std::uint64_t nuisance_seed) {
  LSC_CHECK(a >= 0.0 && a < 1.0, "make_sample: attribute " << a << " outside [0,1)");
  const int s = cfg.image_size;
  const int ch = cfg.image_channels;
  auto nu = detail::draw_nuisance(cfg, nuisance_seed);
  std::vector<R> px(static_cast<std::size_t>(ch) * s * s);

  auto coverage_disk = [&](double x, double y, double r) {
    const double d = std::sqrt((x - nu.cx) * (x - nu.cx) + (y - nu.cy) * (y - nu.cy));
    return std::clamp(r - d + 0.5, 0.0, 1.0);
  };

  const double theta = (a - 0.5) * cfg.theta_range_deg * (3.14159265358979323846 / 180.0);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double half_len = 0.33 * s, half_wid = 0.07 * s;
  auto coverage_bar = [&](double x, double y) {
    const double dx = x - nu.cx, dy = y - nu.cy;
    const double u = ct * dx + st * dy;
    const double v = -st * dx + ct * dy;
    const double d = std::max(std::abs(u) - half_len, std::abs(v) - half_wid);
    return std::clamp(0.5 - d, 0.0, 1.0);
  };

  const bool disks = cfg.kind == "disks";
  const double r = cfg.r_min + a * (cfg.r_max - cfg.r_min);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double cov = disks ? coverage_disk(x, y, r) : coverage_bar(x, y);
      for (int c = 0; c < ch; ++c) {
        const double fg = nu.fg[c % 3];
        px[(static_cast<std::size_t>(c) * s + y) * s + x] =
            static_cast<R>(nu.bg + cov * (fg - nu.bg));
      }
    }

  SyntheticSample<R> out;
  out.image = Tensor<R>::from_data({ch, s, s}, std::move(px));
  out.attribute = a;
  out.domain = attribute_to_domain(a, cfg.n_domains);
  out.nuisance_seed = nuisance_seed;
  return out;
}

// Analytic attribute estimate. Accepts (C,H,W) or a (1,C,H,W) batch slice.
// Background level comes from the border ring, foreground from the soft
// coverage mass; disks invert the area, bars the principal-axis angle.
template <class R>
double oracle_attribute(const Tensor<R>& image, const DatasetConfig& cfg) {
  Shape sh = image.shape();
  LSC_CHECK((sh.size() == 3) || (sh.size() == 4 && sh[0] == 1),
            "oracle_attribute: expected one image, got " << shape_str(sh));
  const int ch = sh[sh.size() - 3], h = sh[sh.size() - 2], w = sh[sh.size() - 1];
  const R* p = image.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> gray(plane, 0.0);
  for (int c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < plane; ++i) gray[i] += static_cast<double>(p[c * plane + i]);
  for (std::size_t i = 0; i < plane; ++i) gray[i] /= ch;

  std::vector<double> border;
  border.reserve(2 * (h + w));
  for (int x = 0; x < w; ++x) {
    border.push_back(gray[x]);
    border.push_back(gray[static_cast<std::size_t>(h - 1) * w + x]);
  }
  for (int y = 1; y + 1 < h; ++y) {
    border.push_back(gray[static_cast<std::size_t>(y) * w]);
    border.push_back(gray[static_cast<std::size_t>(y) * w + w - 1]);
  }
  std::nth_element(border.begin(), border.begin() + border.size() / 2, border.end());
  const double bg = border[border.size() / 2];
  double fg = -2.0;
  for (std::size_t i = 0; i < plane; ++i) fg = std::max(fg, gray[i]);
  if (fg - bg < cfg.min_contrast)
    throw unmeasurable_error("oracle_attribute: no measurable foreground (contrast " +
                             num_str(fg - bg) + ")");

  const double inv_span = 1.0 / (fg - bg);
  if (cfg.kind == "disks") {
    double area = 0;
    for (std::size_t i = 0; i < plane; ++i)
      area += std::clamp((gray[i] - bg) * inv_span, 0.0, 1.0);
    const double r = std::sqrt(area / 3.14159265358979323846);
    const double a = (r - cfg.r_min) / (cfg.r_max - cfg.r_min);
    return std::max(0.0, a);
  }
  // bars: weighted principal axis
  double m = 0, mx = 0, my = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double wgt = std::clamp((gray[static_cast<std::size_t>(y) * w + x] - bg) * inv_span,
                                    0.0, 1.0);
      m += wgt;
      mx += wgt * x;
      my += wgt * y;
    }
  if (m < 1.0) throw unmeasurable_error("oracle_attribute: foreground mass too small");
  const double cx = mx / m, cy = my / m;
  double mu20 = 0, mu02 = 0, mu11 = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double wgt = std::clamp((gray[static_cast<std::size_t>(y) * w + x] - bg) * inv_span,
                                    0.0, 1.0);
      const double dx = x - cx, dy = y - cy;
      mu20 += wgt * dx * dx;
      mu02 += wgt * dy * dy;
      mu11 += wgt * dx * dy;
    }
  const double theta = 0.5 * std::atan2(2.0 * mu11, mu20 - mu02);
  const double range = cfg.theta_range_deg * (3.14159265358979323846 / 180.0);
  return std::max(0.0, theta / range + 0.5);
}

// ---------------------------------------------------------------------------
// batches
// ---------------------------------------------------------------------------

template <class R>
struct Batch {
  Tensor<R> sources;     // (B,C,H,W)
  Tensor<R> targets;     // real images inside the target interval
  Tensor<R> references;  // style references inside the target interval
  std::vector<int> source_labels;
  std::vector<int> target_labels;
  std::vector<double> source_attrs, target_attrs, reference_attrs;
};

template <class R>
Tensor<R> stack_images(const std::vector<Tensor<R>>& imgs) {
  const Shape& s0 = imgs.at(0).shape();
  std::vector<R> data;
  data.reserve(imgs.size() * static_cast<std::size_t>(imgs[0].numel()));
  for (const auto& im : imgs) {
    LSC_CHECK(im.shape() == s0, "stack_images: mixed shapes " << shape_str(s0) << " and "
                                                              << shape_str(im.shape()));
    data.insert(data.end(), im.values().begin(), im.values().end());
  }
  return Tensor<R>::from_data({static_cast<int>(imgs.size()), s0[0], s0[1], s0[2]},
                              std::move(data));
}

// Draw order per element is fixed (source attr/seed, target label, reference
// attr/seed, target attr/seed), so a batch is a pure function of the rng
// state.
template <class R>
Batch<R> sample_batch(const DatasetConfig& cfg, int batch, Rng& rng) {
  LSC_CHECK(batch >= 1, "sample_batch: batch must be >= 1");
  const int n = cfg.n_domains;
  Batch<R> out;
  std::vector<Tensor<R>> srcs, tgts, refs;
  for (int b = 0; b < batch; ++b) {
    const double a_src = rng.uniform();
    const std::uint64_t seed_src = rng.derive_seed();
    const int t = rng.uniform_int(1, n);
    const double lo = static_cast<double>(t - 1) / n, hi = static_cast<double>(t) / n;
    const double a_ref = rng.uniform(lo, hi);
    const std::uint64_t seed_ref = rng.derive_seed();
    const double a_tgt = rng.uniform(lo, hi);
    const std::uint64_t seed_tgt = rng.derive_seed();

    auto s = make_sample<R>(cfg, a_src, seed_src);
    auto rref = make_sample<R>(cfg, std::min(a_ref, std::nextafter(hi, lo)), seed_ref);
    auto tg = make_sample<R>(cfg, std::min(a_tgt, std::nextafter(hi, lo)), seed_tgt);
    out.source_labels.push_back(s.domain);
    out.target_labels.push_back(t);
    out.source_attrs.push_back(s.attribute);
    out.reference_attrs.push_back(rref.attribute);
    out.target_attrs.push_back(tg.attribute);
    srcs.push_back(s.image);
    refs.push_back(rref.image);
    tgts.push_back(tg.image);
  }
  out.sources = stack_images(srcs);
  out.targets = stack_images(tgts);
  out.references = stack_images(refs);
  return out;
}

// ---------------------------------------------------------------------------
// PPM (P6) image I/O, [-1,1] <-> 8-bit
// ---------------------------------------------------------------------------

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround((v + 1.0) * 127.5), 0L, 255L));
}

template <class R>
void write_ppm(const std::string& path, const Tensor<R>& image) {
  Shape sh = image.shape();
  LSC_CHECK(sh.size() == 3 && sh[0] == 3, "write_ppm: expected (3,H,W), got " << shape_str(sh));
  const int h = sh[1], w = sh[2];
  std::ofstream f(path, std::ios::binary);
  LSC_CHECK(f.good(), "write_ppm: cannot open '" << path << "'");
  f << "P6\n" << w << " " << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  const R* p = image.data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + c] =
            to_byte(static_cast<double>(p[c * plane + static_cast<std::size_t>(y) * w + x]));
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  LSC_CHECK(f.good(), "write_ppm: write failed for '" << path << "'");
}

template <class R>
Tensor<R> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  LSC_CHECK(f.good(), "read_ppm: cannot open '" << path << "'");
  std::string magic;
  f >> magic;
  LSC_CHECK(magic == "P6", "read_ppm: '" << path << "' is not a binary PPM (P6)");
  int w = 0, h = 0, maxv = 0;
  f >> w >> h >> maxv;
  LSC_CHECK(w > 0 && h > 0 && maxv == 255, "read_ppm: unsupported header in '" << path << "'");
  f.get();  // single whitespace after maxval
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  LSC_CHECK(f.gcount() == static_cast<std::streamsize>(raw.size()),
            "read_ppm: truncated pixel data in '" << path << "'");
  std::vector<R> px(raw.size());
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      px[c * plane + i] = static_cast<R>(raw[i * 3 + static_cast<std::size_t>(c)] / 127.5 - 1.0);
  return Tensor<R>::from_data({3, h, w}, std::move(px));
}

// Horizontal tiling: one row per source, one column per entry.
template <class R>
Tensor<R> tile_grid(const std::vector<std::vector<Tensor<R>>>& rows) {
  LSC_CHECK(!rows.empty() && !rows[0].empty(), "tile_grid: empty grid");
  const Shape& s0 = rows[0][0].shape();
  const int c = s0[0], h = s0[1], w = s0[2];
  const int ncols = static_cast<int>(rows[0].size());
  const int nrows = static_cast<int>(rows.size());
  Tensor<R> out = Tensor<R>::zeros({c, h * nrows, w * ncols});
  for (int ry = 0; ry < nrows; ++ry) {
    LSC_CHECK(static_cast<int>(rows[ry].size()) == ncols, "tile_grid: ragged rows");
    for (int rx = 0; rx < ncols; ++rx) {
      const Tensor<R>& im = rows[ry][rx];
      LSC_CHECK(im.shape() == s0, "tile_grid: mixed shapes");
      for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < h; ++y)
          std::copy(im.data() + (static_cast<std::size_t>(cc) * h + y) * w,
                    im.data() + (static_cast<std::size_t>(cc) * h + y) * w + w,
                    out.mutable_data() +
                        (static_cast<std::size_t>(cc) * (h * nrows) + ry * h + y) *
                            static_cast<std::size_t>(w * ncols) +
                        static_cast<std::size_t>(rx) * w);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// optional on-disk sample cache: PPM files plus one JSON index
// ---------------------------------------------------------------------------

template <class R>
void write_cache(const std::string& dir, const DatasetConfig& cfg,
                 const std::vector<SyntheticSample<R>>& samples) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.ppm", i);
    write_ppm(dir + "/" + name, samples[i].image);
    index.push_back({{"attribute", samples[i].attribute},
                     {"domain", samples[i].domain},
                     {"seed", samples[i].nuisance_seed}});
  }
  std::ofstream f(dir + "/index.json");
  LSC_CHECK(f.good(), "write_cache: cannot open index in '" << dir << "'");
  f << index.dump(2) << "\n";
  (void)cfg;
}

template <class R>
std::vector<SyntheticSample<R>> load_cache(const std::string& dir) {
  std::ifstream f(dir + "/index.json");
  LSC_CHECK(f.good(), "load_cache: missing index.json in '" << dir << "'");
  nlohmann::json index = nlohmann::json::parse(f);
  std::vector<SyntheticSample<R>> out;
  for (std::size_t i = 0; i < index.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.ppm", i);
    SyntheticSample<R> s;
    s.image = read_ppm<R>(dir + "/" + name);
    s.attribute = index[i].at("attribute").get<double>();
    s.domain = index[i].at("domain").get<int>();
    s.nuisance_seed = index[i].at("seed").get<std::uint64_t>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace lsc
