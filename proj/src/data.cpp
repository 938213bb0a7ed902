#include "histocl/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "histocl/error.hpp"
#include "histocl/rng.hpp"
#include "histocl/stain.hpp"

namespace fs = std::filesystem;

namespace histocl::data {

namespace {

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool is_png(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv_mix(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffu;
    h *= kFnvPrime;
  }
  return h;
}

std::string file_stem_for(const Patch& p, std::size_t index) {
  std::string key = p.source_key.empty() ? "img_" + std::to_string(index) : p.source_key;
  // keep only the last path component and drop an image extension
  if (auto slash = key.find_last_of('/'); slash != std::string::npos) key = key.substr(slash + 1);
  if (key.size() > 4 && is_png(fs::path(key))) key.resize(key.size() - 4);
  for (char& c : key) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return key;
}

}  // namespace

void SplitSpec::validate() const {
  for (double f : {train, val, test}) {
    if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("split fractions must lie in [0,1]");
  }
  if (std::abs(train + val + test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

std::uint64_t checksum(const Patch& p) {
  std::uint64_t h = kFnvOffset;
  for (std::uint8_t b : p.pixels) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

nlohmann::json manifest(const Dataset& ds) {
  nlohmann::json classes = nlohmann::json::array();
  const auto by_class = ds.indices_by_class();
  std::uint64_t total = kFnvOffset;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::uint64_t h = kFnvOffset;
    for (std::size_t i : by_class[c]) h = fnv_mix(h, checksum(ds.patches[i]));
    total = fnv_mix(total, h);
    classes.push_back({{"name", ds.class_names[c]}, {"count", by_class[c].size()}, {"checksum", hex64(h)}});
  }
  return {{"classes", classes}, {"total", ds.size()}, {"checksum", hex64(total)}};
}

Dataset load_folder(const fs::path& root, const std::optional<std::vector<std::string>>& expected_classes) {
  if (!fs::is_directory(root)) throw MissingClass("dataset root does not exist: " + root.string());
  std::vector<fs::path> class_dirs = sorted_entries(root, true);

  Dataset ds;
  if (expected_classes) {
    std::vector<fs::path> chosen;
    for (const auto& name : *expected_classes) {
      auto it = std::find_if(class_dirs.begin(), class_dirs.end(),
                             [&](const fs::path& p) { return p.filename().string() == name; });
      if (it == class_dirs.end()) throw MissingClass("expected class folder missing: " + (root / name).string());
      chosen.push_back(*it);
    }
    class_dirs = std::move(chosen);
  }
  if (class_dirs.empty()) throw MissingClass("no class folders under " + root.string());

  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    const std::string name = class_dirs[c].filename().string();
    ds.class_names.push_back(name);
    for (const auto& file : sorted_entries(class_dirs[c], false)) {
      if (!is_png(file)) continue;
      Patch p = read_png(file);
      p.class_id = static_cast<int>(c);
      p.source_key = name + "/" + file.filename().string();
      ds.patches.push_back(std::move(p));
    }
  }
  if (ds.empty()) throw MissingClass("no PNG images found under " + root.string());
  return ds;
}

Dataset load_augmented_folder(const fs::path& root) {
  Dataset out;
  for (int k = 1; k <= 5; ++k) {
    const fs::path dir = root / ("domain_" + std::to_string(k));
    if (!fs::is_directory(dir)) throw MissingClass("missing domain folder: " + dir.string());
    Dataset part = load_folder(dir, out.class_names.empty() ? std::nullopt
                                                            : std::optional<std::vector<std::string>>(out.class_names));
    if (out.class_names.empty()) out.class_names = part.class_names;
    for (auto& p : part.patches) {
      p.domain_id = k;
      p.source_key = "domain_" + std::to_string(k) + "/" + p.source_key;
      out.patches.push_back(std::move(p));
    }
  }
  // restore (class, key) order so the result does not depend on domain grouping
  std::stable_sort(out.patches.begin(), out.patches.end(), [](const Patch& a, const Patch& b) {
    return a.class_id < b.class_id;
  });
  return out;
}

nlohmann::json write_folder(const Dataset& ds, const fs::path& root, bool with_domains) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  std::set<fs::path> used;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Patch& p = ds.patches[i];
    fs::path dir = root;
    if (with_domains) {
      if (!p.domain_id) throw IoError("patch " + std::to_string(i) + " has no domain id");
      dir /= "domain_" + std::to_string(*p.domain_id);
    }
    dir /= ds.class_names.at(static_cast<std::size_t>(p.class_id));
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    fs::path file = dir / (file_stem_for(p, i) + ".png");
    if (used.count(file)) file = dir / (file_stem_for(p, i) + "_" + std::to_string(i) + ".png");
    used.insert(file);
    write_png(p, file);
  }
  nlohmann::json m = manifest(ds);
  const fs::path mf = root / "manifest.json";
  std::ofstream out(mf);
  if (!out) throw IoError("cannot write " + mf.string());
  out << m.dump(2) << "\n";
  return m;
}

Splits split(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::vector<std::size_t>> groups;
  if (spec.stratified) {
    groups = ds.indices_by_class();
  } else {
    groups.emplace_back(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) groups[0][i] = i;
  }
  std::vector<int> part(ds.size(), 0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto idx = groups[g];
    Rng rng = make_rng(spec.seed, 0x5117ull + g);
    shuffle(idx.begin(), idx.end(), rng);
    const double n = static_cast<double>(idx.size());
    // cumulative rounding keeps each part within one item of fraction * n
    const auto b1 = static_cast<std::size_t>(std::llround(spec.train * n));
    const auto b2 = std::max(b1, static_cast<std::size_t>(std::llround((spec.train + spec.val) * n)));
    for (std::size_t k = 0; k < idx.size(); ++k) part[idx[k]] = k < b1 ? 0 : (k < b2 ? 1 : 2);
  }
  Splits out{ds.empty_like(), ds.empty_like(), ds.empty_like()};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Dataset& target = part[i] == 0 ? out.train : (part[i] == 1 ? out.val : out.test);
    target.patches.push_back(ds.patches[i]);
  }
  return out;
}

Patch downscale(const Patch& p, int side) {
  if (side < 8) throw ShapeMismatch("downscale side must be at least 8");
  if (p.width == side && p.height == side) return p;
  Patch out = p;
  out.width = side;
  out.height = side;
  out.pixels.assign(static_cast<std::size_t>(side) * side * 3, 0);
  const double sx = static_cast<double>(p.width) / side;
  const double sy = static_cast<double>(p.height) / side;
  for (int y = 0; y < side; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(p.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, p.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < side; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(p.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, p.width - 1);
      const double wx = fx - x0;
      const Rgb a = p.at(x0, y0), b = p.at(x1, y0), c = p.at(x0, y1), d = p.at(x1, y1);
      Rgb px{};
      for (int ch = 0; ch < 3; ++ch) {
        const double top = a[ch] * (1.0 - wx) + b[ch] * wx;
        const double bottom = c[ch] * (1.0 - wx) + d[ch] * wx;
        px[ch] = static_cast<std::uint8_t>(std::clamp(std::round(top * (1.0 - wy) + bottom * wy), 0.0, 255.0));
      }
      out.set(x, y, px);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic generator

namespace {

struct ClassSignature {
  double hema;      // mean hematoxylin concentration scale
  double eosin;     // mean eosin concentration scale
  int nuclei;       // blob count
  double radius;    // blob sigma as a fraction of the side
};

// Spread over the (c_H, c_E) plane; first entries are the most separated.
constexpr std::array<ClassSignature, 16> kSignatures{{
    {0.20, 0.20, 3, 0.10},
    {0.85, 0.25, 12, 0.05},
    {0.25, 0.75, 5, 0.12},
    {0.90, 0.80, 16, 0.04},
    {0.55, 0.45, 8, 0.08},
    {0.15, 1.10, 2, 0.16},
    {0.60, 0.95, 10, 0.06},
    {1.20, 0.35, 20, 0.035},
    {0.45, 0.12, 6, 0.09},
    {1.10, 1.15, 14, 0.05},
    {0.35, 0.45, 4, 0.14},
    {0.75, 0.60, 9, 0.07},
    {1.40, 0.70, 24, 0.03},
    {0.10, 0.55, 2, 0.20},
    {0.70, 1.35, 7, 0.10},
    {1.00, 0.05, 18, 0.045},
}};

Patch render_synthetic(const ClassSignature& sig, int side, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(side) * side;
  stain::ConcentrationMap c;
  c.width = side;
  c.height = side;
  for (auto& plane : c.planes) plane.assign(n, 0.0);

  const double jitter_h = std::clamp(normal(rng, 1.0, 0.06), 0.8, 1.2);
  const double jitter_e = std::clamp(normal(rng, 1.0, 0.06), 0.8, 1.2);

  // eosin: smooth background from a few broad bumps
  std::vector<std::array<double, 4>> broad(3);
  for (auto& b : broad) b = {uniform(rng, 0, side), uniform(rng, 0, side), uniform(rng, 0.25, 0.5) * side, uniform(rng, -0.3, 0.3)};
  // hematoxylin: nuclei-like blobs
  const int count = std::max(1, sig.nuclei + static_cast<int>(std::lround(normal(rng, 0.0, 1.0))));
  std::vector<std::array<double, 4>> blobs(static_cast<std::size_t>(count));
  for (auto& b : blobs) {
    b = {uniform(rng, 0, side), uniform(rng, 0, side), sig.radius * side * uniform(rng, 0.8, 1.25),
         uniform(rng, 0.8, 1.2)};
  }
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      double e = 1.0;
      for (const auto& b : broad) {
        const double dx = x - b[0], dy = y - b[1];
        e += b[3] * std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
      }
      double h = 0.35;
      for (const auto& b : blobs) {
        const double dx = x - b[0], dy = y - b[1];
        h += 1.3 * b[3] * std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
      }
      const std::size_t i = static_cast<std::size_t>(y) * side + x;
      c.planes[0][i] = sig.hema * jitter_h * std::min(h, 2.0);
      c.planes[1][i] = sig.eosin * jitter_e * std::max(e, 0.2);
      c.planes[2][i] = 0.0;
    }
  }
  return stain::remix(c, stain::StainMatrix::default_he(), {1.0, 1.0, 1.0});
}

}  // namespace

std::pair<double, double> synth_class_signature(int class_id) {
  const auto& s = kSignatures.at(static_cast<std::size_t>(class_id));
  return {s.hema, s.eosin};
}

std::vector<Patch> synth_generate_class(int class_id, int per_class, int side, std::uint64_t seed) {
  if (class_id < 0 || class_id >= static_cast<int>(kSignatures.size())) {
    throw ConfigError("synthetic class id out of range");
  }
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(per_class));
  const std::uint64_t class_seed = derive_seed(seed, 0x5E7Dull + static_cast<std::uint64_t>(class_id));
  for (int i = 0; i < per_class; ++i) {
    Rng rng = make_rng(class_seed, static_cast<std::uint64_t>(i));
    Patch p = render_synthetic(kSignatures[static_cast<std::size_t>(class_id)], side, rng);
    p.class_id = class_id;
    char key[64];
    std::snprintf(key, sizeof key, "synth/class_%02d/%05d", class_id, i);
    p.source_key = key;
    out.push_back(std::move(p));
  }
  return out;
}

Dataset synth_generate(int n_classes, int per_class, int side, std::uint64_t seed) {
  if (n_classes < 2 || n_classes > 16) throw ConfigError("synthetic class count must be in [2, 16]");
  if (per_class < 10) throw ConfigError("synthetic per-class count must be at least 10");
  if (side < 8) throw ConfigError("synthetic side must be at least 8");
  Dataset ds;
  for (int c = 0; c < n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%02d", c);
    ds.class_names.emplace_back(name);
    auto patches = synth_generate_class(c, per_class, side, seed);
    std::move(patches.begin(), patches.end(), std::back_inserter(ds.patches));
  }
  ds.metadata["source"] = "synthetic";
  ds.metadata["seed"] = std::to_string(seed);
  return ds;
}

}  // namespace histocl::data
