#include "ktraj/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "ktraj/errors.hpp"
#include "ktraj/rng.hpp"

namespace ktraj {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Modified Shepp-Logan ellipse set (higher-contrast intensities).
const std::vector<Ellipse> kBasePhantom = {
    {0.0, 0.0, 0.69, 0.92, 0.0, 1.0},
    {0.0, -0.0184, 0.6624, 0.8740, 0.0, -0.8},
    {0.22, 0.0, 0.11, 0.31, -18.0 * kPi / 180.0, -0.2},
    {-0.22, 0.0, 0.16, 0.41, 18.0 * kPi / 180.0, -0.2},
    {0.0, 0.35, 0.21, 0.25, 0.0, 0.1},
    {0.0, 0.1, 0.046, 0.046, 0.0, 0.1},
    {0.0, -0.1, 0.046, 0.046, 0.0, 0.1},
    {-0.08, -0.605, 0.046, 0.023, 0.0, 0.1},
    {0.0, -0.606, 0.023, 0.023, 0.0, 0.1},
    {0.06, -0.605, 0.023, 0.046, 0.0, 0.1},
};

double render_point(const std::vector<Ellipse>& ellipses, double u, double v) {
  double acc = 0.0;
  for (const Ellipse& e : ellipses) {
    const double du = u - e.cx;
    const double dv = v - e.cy;
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    const double x = du * c + dv * s;
    const double y = -du * s + dv * c;
    const double q = (x / e.ax) * (x / e.ax) + (y / e.ay) * (y / e.ay);
    if (q <= 1.0) acc += e.intensity;
  }
  return acc;
}

}  // namespace

Phantom make_phantom(int grid, std::uint64_t seed, int n_ellipses) {
  if (grid < 16) {
    throw argument_error("make_phantom: grid must be >= 16, got " + std::to_string(grid));
  }
  if (n_ellipses < 0) {
    throw argument_error("make_phantom: n_ellipses must be >= 0, got " +
                         std::to_string(n_ellipses));
  }
  Phantom p;
  p.grid = grid;
  p.descriptor = kBasePhantom;
  Rng rng(seed);
  for (int i = 0; i < n_ellipses; ++i) {
    Ellipse e;
    const double r = 0.7 * std::sqrt(rng.uniform());
    const double th = rng.uniform(0.0, 2.0 * kPi);
    e.cx = r * std::cos(th);
    e.cy = r * std::sin(th);
    e.ax = rng.uniform(0.05, 0.25);
    e.ay = rng.uniform(0.05, 0.25);
    e.angle = rng.uniform(0.0, kPi);
    e.intensity = rng.uniform(-0.3, 0.3);
    p.descriptor.push_back(e);
  }

  // 2x supersampling: render 2grid x 2grid at sub-pixel centers, then average
  // each 2x2 block.
  const int m = 2 * grid;
  std::vector<double> fine(static_cast<std::size_t>(m) * m);
  for (int iy = 0; iy < m; ++iy) {
    const double v = (static_cast<double>(iy) + 0.5) / m * 2.0 - 1.0;
    for (int ix = 0; ix < m; ++ix) {
      const double u = (static_cast<double>(ix) + 0.5) / m * 2.0 - 1.0;
      fine[static_cast<std::size_t>(iy) * m + ix] = render_point(p.descriptor, u, v);
    }
  }
  p.image.assign(static_cast<std::size_t>(grid) * grid, 0.0);
  double peak = 0.0;
  for (int iy = 0; iy < grid; ++iy) {
    for (int ix = 0; ix < grid; ++ix) {
      const std::size_t f = static_cast<std::size_t>(2 * iy) * m + static_cast<std::size_t>(2 * ix);
      double v = 0.25 * (fine[f] + fine[f + 1] + fine[f + m] + fine[f + m + 1]);
      if (v < 0.0) v = 0.0;
      p.image[static_cast<std::size_t>(iy) * grid + ix] = v;
      peak = std::max(peak, v);
    }
  }
  if (peak > 0.0) {
    for (double& v : p.image) v /= peak;
  }
  return p;
}

CoilSet make_coils(int grid, int coils, std::uint64_t seed) {
  if (grid < 1) throw argument_error("make_coils: grid must be >= 1");
  if (coils < 1) {
    throw argument_error("make_coils: coils must be >= 1, got " + std::to_string(coils));
  }
  Rng rng(seed);
  CoilSet set;
  set.grid = grid;
  set.maps.assign(static_cast<std::size_t>(coils), make_image(grid));
  const double sigma = 0.9;
  for (int c = 0; c < coils; ++c) {
    // Anchor on the unit circle, jittered a little so seeds differ beyond phase.
    const double th = 2.0 * kPi * static_cast<double>(c) / coils + rng.uniform(-0.1, 0.1);
    const double acx = std::cos(th), acy = std::sin(th);
    // Low-order polynomial phase coefficients.
    double ph[6];
    for (double& x : ph) x = rng.uniform(-kPi, kPi);
    ComplexImage& map = set.maps[static_cast<std::size_t>(c)];
    for (int iy = 0; iy < grid; ++iy) {
      const double v = (static_cast<double>(iy) + 0.5) / grid * 2.0 - 1.0;
      for (int ix = 0; ix < grid; ++ix) {
        const double u = (static_cast<double>(ix) + 0.5) / grid * 2.0 - 1.0;
        const double d2 = (u - acx) * (u - acx) + (v - acy) * (v - acy);
        const double mag = std::exp(-d2 / (2.0 * sigma * sigma));
        const double phase =
            ph[0] + ph[1] * u + ph[2] * v + 0.5 * (ph[3] * u * v + ph[4] * u * u + ph[5] * v * v);
        map.at(ix, iy) = std::polar(mag, phase);
      }
    }
  }
  // Normalize to unit sum-of-squares per pixel.
  for (std::size_t i = 0; i < set.maps.front().data.size(); ++i) {
    double norm2 = 0.0;
    for (int c = 0; c < coils; ++c) norm2 += std::norm(set.maps[static_cast<std::size_t>(c)].data[i]);
    const double inv = 1.0 / std::sqrt(norm2);
    for (int c = 0; c < coils; ++c) set.maps[static_cast<std::size_t>(c)].data[i] *= inv;
  }
  return set;
}

std::vector<ComplexImage> simulate_coil_images(const Phantom& phantom, const CoilSet& coils) {
  if (coils.grid != phantom.grid || coils.maps.empty()) {
    throw argument_error("simulate_coil_images: coil grid " + std::to_string(coils.grid) +
                         " does not match phantom grid " + std::to_string(phantom.grid));
  }
  std::vector<ComplexImage> out(coils.maps.size(), make_image(phantom.grid));
  for (std::size_t c = 0; c < coils.maps.size(); ++c) {
    for (std::size_t i = 0; i < phantom.image.size(); ++i) {
      out[c].data[i] = coils.maps[c].data[i] * phantom.image[i];
    }
  }
  return out;
}

DatasetSplit dataset_split(int n, double train_frac, double val_frac, double test_frac,
                           std::uint64_t seed) {
  if (n < 0) throw argument_error("dataset_split: n must be >= 0");
  const double sum = train_frac + val_frac + test_frac;
  if (std::abs(sum - 1.0) > 1e-12) {
    throw argument_error("dataset_split: fractions sum to " + std::to_string(sum) + ", not 1");
  }
  if (train_frac < 0.0 || val_frac < 0.0 || test_frac < 0.0) {
    throw argument_error("dataset_split: fractions must be nonnegative");
  }
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  const int n_train = static_cast<int>(std::llround(train_frac * n));
  const int n_val = std::min(static_cast<int>(std::llround(val_frac * n)), n - n_train);
  DatasetSplit split;
  split.train.assign(idx.begin(), idx.begin() + n_train);
  split.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  split.test.assign(idx.begin() + n_train + n_val, idx.end());
  return split;
}

void save_pgm16(const std::vector<double>& values, int h, int w, const std::string& path) {
  if (h < 1 || w < 1 ||
      values.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    throw argument_error("save_pgm16: values length " + std::to_string(values.size()) +
                         " does not match " + std::to_string(h) + "x" + std::to_string(w));
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  const double scale = hi > lo ? 65535.0 / (hi - lo) : 0.0;
  std::string bytes;
  bytes.reserve(values.size() * 2);
  for (double v : values) {
    const long q = std::lround((v - lo) * scale);
    const unsigned s = static_cast<unsigned>(std::clamp(q, 0L, 65535L));
    bytes.push_back(static_cast<char>((s >> 8) & 0xffu));  // big-endian
    bytes.push_back(static_cast<char>(s & 0xffu));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("save_pgm16: cannot open " + path);
  out << "P5\n" << w << ' ' << h << "\n65535\n";
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("save_pgm16: short write to " + path);
}

namespace {

[[noreturn]] void pgm_fail(const std::string& path, std::size_t offset, const std::string& what) {
  throw io_error("load_pgm16: " + path + ": " + what + " at byte " + std::to_string(offset));
}

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(const std::string& buf, std::size_t& pos, const std::string& path) {
  while (pos < buf.size()) {
    if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
  if (start == pos) pgm_fail(path, start, "missing header token");
  return buf.substr(start, pos - start);
}

long pgm_number(const std::string& buf, std::size_t& pos, const std::string& path) {
  const std::size_t at = pos;
  const std::string tok = pgm_token(buf, pos, path);
  try {
    std::size_t used = 0;
    const long v = std::stol(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    pgm_fail(path, at, "expected a number, got '" + tok + "'");
  }
}

}  // namespace

LoadedImage load_pgm16(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("load_pgm16: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  std::size_t pos = 0;
  const std::string magic = pgm_token(buf, pos, path);
  if (magic != "P5") pgm_fail(path, 0, "bad magic '" + magic + "'");
  const long w = pgm_number(buf, pos, path);
  const long h = pgm_number(buf, pos, path);
  const long maxval = pgm_number(buf, pos, path);
  if (w < 1 || h < 1) pgm_fail(path, pos, "bad dimensions");
  if (maxval != 65535) pgm_fail(path, pos, "expected maxval 65535, got " + std::to_string(maxval));
  if (pos >= buf.size()) pgm_fail(path, pos, "missing raster");
  ++pos;  // the single whitespace byte after maxval

  LoadedImage img;
  img.h = static_cast<int>(h);
  img.w = static_cast<int>(w);
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 2;
  if (buf.size() - pos < need) {
    pgm_fail(path, buf.size(), "truncated raster (need " + std::to_string(need) + " bytes, have " +
                                   std::to_string(buf.size() - pos) + ")");
  }
  img.values.resize(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const unsigned hi8 = static_cast<unsigned char>(buf[pos + 2 * i]);
    const unsigned lo8 = static_cast<unsigned char>(buf[pos + 2 * i + 1]);
    img.values[i] = static_cast<double>((hi8 << 8) | lo8) / 65535.0;
  }
  return img;
}

void save_raw_f32(const std::vector<double>& values, const std::vector<int>& shape,
                  const std::string& stem) {
  std::size_t count = 1;
  for (int d : shape) {
    if (d <= 0) throw argument_error("save_raw_f32: non-positive dimension");
    count *= static_cast<std::size_t>(d);
  }
  if (count != values.size()) {
    throw argument_error("save_raw_f32: values length " + std::to_string(values.size()) +
                         " does not match shape product " + std::to_string(count));
  }
  std::string bytes;
  bytes.reserve(values.size() * 4);
  for (double v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t u = 0;
    std::memcpy(&u, &f, 4);
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xffu));
  }
  {
    std::ofstream out(stem + ".f32", std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("save_raw_f32: cannot open " + stem + ".f32");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw io_error("save_raw_f32: short write to " + stem + ".f32");
  }
  nlohmann::json meta;
  meta["shape"] = shape;
  meta["dtype"] = "f32";
  meta["order"] = "row-major";
  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw io_error("save_raw_f32: cannot open " + stem + ".json");
  out << meta.dump(2) << '\n';
}

LoadedRaw load_raw_f32(const std::string& stem) {
  std::ifstream jin(stem + ".json");
  if (!jin) throw io_error("load_raw_f32: cannot open " + stem + ".json");
  LoadedRaw raw;
  std::size_t count = 1;
  try {
    nlohmann::json meta = nlohmann::json::parse(jin);
    if (meta.at("dtype").get<std::string>() != "f32") {
      throw io_error("load_raw_f32: unsupported dtype in " + stem + ".json");
    }
    raw.shape = meta.at("shape").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw io_error("load_raw_f32: bad sidecar " + stem + ".json: " + e.what());
  }
  for (int d : raw.shape) {
    if (d <= 0) throw io_error("load_raw_f32: non-positive dimension in sidecar");
    count *= static_cast<std::size_t>(d);
  }
  std::ifstream in(stem + ".f32", std::ios::binary);
  if (!in) throw io_error("load_raw_f32: cannot open " + stem + ".f32");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() != count * 4) {
    throw io_error("load_raw_f32: " + stem + ".f32 holds " + std::to_string(buf.size()) +
                   " bytes, sidecar shape needs " + std::to_string(count * 4));
  }
  raw.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) {
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * i + b])) << (8 * b);
    }
    float f = 0.0f;
    std::memcpy(&f, &u, 4);
    raw.values[i] = static_cast<double>(f);
  }
  return raw;
}

void save_svg_heatmap(const std::vector<double>& values, int h, int w, const std::string& path,
                      const std::string& title) {
  if (h < 1 || w < 1 ||
      values.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w)) {
    throw argument_error("save_svg_heatmap: values length does not match dimensions");
  }
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
  const int cell = 4;
  const int header = title.empty() ? 0 : 18;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w * cell << "\" height=\""
      << h * cell + header << "\" viewBox=\"0 0 " << w * cell << ' ' << h * cell + header
      << "\">\n";
  if (!title.empty()) {
    svg << "<text x=\"2\" y=\"13\" font-family=\"monospace\" font-size=\"12\">" << title
        << "</text>\n";
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double t = (values[static_cast<std::size_t>(y) * w + x] - lo) * scale;
      const int g = static_cast<int>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
      svg << "<rect x=\"" << x * cell << "\" y=\"" << y * cell + header << "\" width=\"" << cell
          << "\" height=\"" << cell << "\" fill=\"rgb(" << g << ',' << g << ',' << g << ")\"/>\n";
    }
  }
  svg << "</svg>\n";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("save_svg_heatmap: cannot open " + path);
  out << svg.str();
  if (!out) throw io_error("save_svg_heatmap: short write to " + path);
}

}  // namespace ktraj
