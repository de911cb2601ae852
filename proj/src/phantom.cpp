#include "airseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "airseg/morphology.hpp"
#include "airseg/rng.hpp"

namespace airseg {

using nlohmann::json;

void PhantomSpec::validate() const {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    throw std::invalid_argument("phantom: dims must be positive");
  if (generations < 1) throw std::invalid_argument("phantom: generations must be >= 1");
  if (!(root_radius_mm > 0)) throw std::invalid_argument("phantom: root radius must be > 0");
  if (!(child_radius_ratio > 0 && child_radius_ratio < 1))
    throw std::invalid_argument("phantom: child radius ratio must be in (0,1)");
  if (!(root_length_mm > 0) || !(child_length_ratio > 0))
    throw std::invalid_argument("phantom: lengths must be positive");
  for (double s : spacing)
    if (!(s > 0)) throw std::invalid_argument("phantom: spacing must be positive");
}

json PhantomSpec::to_json() const {
  json j;
  j["dims"] = dims;
  j["spacing"] = spacing;
  j["generations"] = generations;
  j["root_radius_mm"] = root_radius_mm;
  j["child_radius_ratio"] = child_radius_ratio;
  j["root_length_mm"] = root_length_mm;
  j["child_length_ratio"] = child_length_ratio;
  j["branch_angle_deg"] = branch_angle_deg;
  j["lumen_level"] = lumen_level;
  j["wall_level"] = wall_level;
  j["background_level"] = background_level;
  j["wall_thickness_mm"] = wall_thickness_mm;
  j["noise_sigma"] = noise_sigma;
  j["blur_sigma"] = blur_sigma;
  j["seed"] = seed;
  return j;
}

PhantomSpec PhantomSpec::from_json(const json& j) {
  PhantomSpec s;
  if (j.contains("dims")) s.dims = j["dims"].get<std::array<int, 3>>();
  if (j.contains("spacing")) s.spacing = j["spacing"].get<std::array<double, 3>>();
  s.generations = j.value("generations", s.generations);
  s.root_radius_mm = j.value("root_radius_mm", s.root_radius_mm);
  s.child_radius_ratio = j.value("child_radius_ratio", s.child_radius_ratio);
  s.root_length_mm = j.value("root_length_mm", s.root_length_mm);
  s.child_length_ratio = j.value("child_length_ratio", s.child_length_ratio);
  if (j.contains("branch_angle_deg"))
    s.branch_angle_deg = j["branch_angle_deg"].get<std::array<double, 2>>();
  s.lumen_level = j.value("lumen_level", s.lumen_level);
  s.wall_level = j.value("wall_level", s.wall_level);
  s.background_level = j.value("background_level", s.background_level);
  s.wall_thickness_mm = j.value("wall_thickness_mm", s.wall_thickness_mm);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.blur_sigma = j.value("blur_sigma", s.blur_sigma);
  s.seed = j.value("seed", s.seed);
  return s;
}

namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 addv(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
Vec3 normalize(const Vec3& a) {
  const double n = norm(a);
  return n > 0 ? scale(a, 1.0 / n) : Vec3{0, 0, 1};
}
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = sub(b, a);
  const double len2 = dot(ab, ab);
  double t = len2 > 0 ? dot(sub(p, a), ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec3 proj = addv(a, scale(ab, t));
  return norm(sub(p, proj));
}

uint64_t derive_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Grows the binary capsule tree. The root starts near the top-center and
// points mostly downward so the largest-z end is the trachea end.
std::vector<PhantomBranch> grow_tree(const PhantomSpec& spec, Rng& rng) {
  const Vec3 extent{(spec.dims[0] - 1) * spec.spacing[0], (spec.dims[1] - 1) * spec.spacing[1],
                    (spec.dims[2] - 1) * spec.spacing[2]};
  std::vector<PhantomBranch> branches;

  struct Todo {
    Vec3 start;
    Vec3 dir;
    double radius, length;
    int generation, parent;
  };

  const double margin = spec.root_radius_mm + 2.0 * (*std::max_element(spec.spacing.begin(),
                                                                       spec.spacing.end()));
  const double tilt = rng.uniform(0.0, 6.0) * M_PI / 180.0;
  const double tilt_az = rng.uniform(0.0, 2.0 * M_PI);
  const Vec3 root_dir = normalize(
      {std::sin(tilt) * std::cos(tilt_az), std::sin(tilt) * std::sin(tilt_az), -std::cos(tilt)});
  std::vector<Todo> todo{{{extent[0] / 2, extent[1] / 2, extent[2] - margin},
                          root_dir,
                          spec.root_radius_mm,
                          spec.root_length_mm,
                          0,
                          -1}};

  while (!todo.empty()) {
    const Todo t = todo.front();
    todo.erase(todo.begin());
    PhantomBranch br;
    br.p0 = t.start;
    br.generation = t.generation;
    br.parent = t.parent;
    br.radius_mm = t.radius;

    // clip the segment so the capsule stays inside the volume
    double tmax = t.length;
    for (int a = 0; a < 3; ++a) {
      const double lo = t.radius + spec.spacing[size_t(a)];
      const double hi = extent[size_t(a)] - t.radius - spec.spacing[size_t(a)];
      if (std::abs(t.dir[size_t(a)]) > 1e-12) {
        const double to_lo = (lo - t.start[size_t(a)]) / t.dir[size_t(a)];
        const double to_hi = (hi - t.start[size_t(a)]) / t.dir[size_t(a)];
        tmax = std::min(tmax, std::max(to_lo, to_hi));
      }
    }
    br.clipped = tmax < t.length;
    const double len = std::max(1.0, tmax);
    br.p1 = addv(t.start, scale(t.dir, len));
    const int id = int(branches.size());
    branches.push_back(br);

    if (t.generation + 1 < spec.generations) {
      // two children on opposite azimuths
      const Vec3 d = t.dir;
      Vec3 ref = std::abs(d[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
      const Vec3 u = normalize(cross(d, ref));
      const Vec3 v = cross(d, u);
      const double az = rng.uniform(0.0, 2.0 * M_PI);
      for (int c = 0; c < 2; ++c) {
        const double theta =
            rng.uniform(spec.branch_angle_deg[0], spec.branch_angle_deg[1]) * M_PI / 180.0;
        const double phi = az + c * M_PI;
        const Vec3 lateral = addv(scale(u, std::cos(phi)), scale(v, std::sin(phi)));
        const Vec3 cdir =
            normalize(addv(scale(d, std::cos(theta)), scale(lateral, std::sin(theta))));
        todo.push_back({br.p1, cdir, t.radius * spec.child_radius_ratio,
                        t.length * spec.child_length_ratio, t.generation + 1, id});
      }
    }
  }
  return branches;
}

void gaussian_blur_inplace(Volume3& vol, double sigma_voxels) {
  if (sigma_voxels <= 0) return;
  const int radius = std::max(1, int(std::ceil(3.0 * sigma_voxels)));
  std::vector<double> kernel(size_t(2 * radius + 1));
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * (i * i) / (sigma_voxels * sigma_voxels));
    sum += kernel[size_t(i + radius)];
  }
  for (auto& k : kernel) k /= sum;

  Volume3 tmp = vol;
  auto pass = [&](const Volume3& src, Volume3& dst, int axis) {
    const auto& d = src.dims;
    for (int z = 0; z < d[2]; ++z) {
      for (int y = 0; y < d[1]; ++y) {
        for (int x = 0; x < d[0]; ++x) {
          double acc = 0;
          for (int k = -radius; k <= radius; ++k) {
            int q[3] = {x, y, z};
            q[axis] = std::clamp(q[axis] + k, 0, d[size_t(axis)] - 1);
            acc += kernel[size_t(k + radius)] * src.at(q[0], q[1], q[2]);
          }
          dst.at(x, y, z) = float(acc);
        }
      }
    }
  };
  pass(vol, tmp, 0);
  pass(tmp, vol, 1);
  pass(vol, tmp, 2);
  vol = tmp;
}

}  // namespace

bool inside_capsules(const std::vector<PhantomBranch>& branches, const Vec3& point_mm) {
  for (const auto& b : branches) {
    if (point_segment_distance(point_mm, b.p0, b.p1) <= b.radius_mm) return true;
  }
  return false;
}

Phantom generate(const PhantomSpec& spec) {
  spec.validate();
  Phantom ph;
  Rng tree_rng(derive_seed(spec.seed, 0));
  ph.branches = grow_tree(spec, tree_rng);

  ph.gt_mask = Volume3(spec.dims, VolumeKind::Mask, 0.0f, spec.spacing);
  // rasterize per branch over its bounding box
  for (const auto& b : ph.branches) {
    int lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      const double mn = std::min(b.p0[size_t(a)], b.p1[size_t(a)]) - b.radius_mm;
      const double mx = std::max(b.p0[size_t(a)], b.p1[size_t(a)]) + b.radius_mm;
      lo[a] = std::max(0, int(std::floor(mn / spec.spacing[size_t(a)])) - 1);
      hi[a] = std::min(spec.dims[size_t(a)] - 1,
                       int(std::ceil(mx / spec.spacing[size_t(a)])) + 1);
    }
    for (int z = lo[2]; z <= hi[2]; ++z) {
      for (int y = lo[1]; y <= hi[1]; ++y) {
        for (int x = lo[0]; x <= hi[0]; ++x) {
          const Vec3 p{x * spec.spacing[0], y * spec.spacing[1], z * spec.spacing[2]};
          if (point_segment_distance(p, b.p0, b.p1) <= b.radius_mm) {
            ph.gt_mask.at(x, y, z) = 1.0f;
          }
        }
      }
    }
  }

  ph.intensity = Volume3(spec.dims, VolumeKind::Intensity, float(spec.background_level),
                         spec.spacing);
  if (spec.wall_thickness_mm > 0 && ph.gt_mask.count_nonzero() > 0) {
    const Volume3 dist = distance_transform(ph.gt_mask, /*spacing_aware=*/true);
    for (size_t i = 0; i < dist.voxels.size(); ++i) {
      if (ph.gt_mask.voxels[i] == 0.0f && dist.voxels[i] <= spec.wall_thickness_mm) {
        ph.intensity.voxels[i] = float(spec.wall_level);
      }
    }
  }
  for (size_t i = 0; i < ph.gt_mask.voxels.size(); ++i) {
    if (ph.gt_mask.voxels[i] != 0.0f) ph.intensity.voxels[i] = float(spec.lumen_level);
  }
  gaussian_blur_inplace(ph.intensity, spec.blur_sigma);
  if (spec.noise_sigma > 0) {
    Rng noise_rng(derive_seed(spec.seed, 1));
    for (auto& v : ph.intensity.voxels) v += float(noise_rng.normal(0.0, spec.noise_sigma));
  }
  return ph;
}

json DatasetManifest::to_json() const {
  json j;
  j["spec_template"] = spec_template.to_json();
  json es = json::array();
  for (const auto& e : entries) {
    es.push_back({{"name", e.name}, {"seed", e.seed}, {"split", e.split}});
  }
  j["entries"] = es;
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  DatasetManifest m;
  m.spec_template = PhantomSpec::from_json(j.at("spec_template"));
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("name").get<std::string>(), e.at("seed").get<uint64_t>(),
                         e.at("split").get<std::string>()});
  }
  return m;
}

DatasetManifest make_dataset(const PhantomSpec& spec_template, int n, uint64_t seed,
                             std::array<int, 3> split, const std::string& out_dir) {
  if (n < 3) throw std::invalid_argument("make_dataset: need at least 3 volumes");
  if (split[0] + split[1] + split[2] != n) {
    throw std::invalid_argument("make_dataset: split does not sum to n");
  }
  std::filesystem::create_directories(out_dir);
  DatasetManifest manifest;
  manifest.spec_template = spec_template;
  json analytic = json::array();
  for (int i = 0; i < n; ++i) {
    DatasetEntry e;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "phantom_%03d", i);
    e.name = buf;
    e.seed = derive_seed(seed, uint64_t(i) + 100);
    e.split = i < split[0] ? "train" : (i < split[0] + split[1] ? "val" : "test");
    PhantomSpec spec = spec_template;
    spec.seed = e.seed;
    const Phantom ph = generate(spec);
    write_volume(ph.intensity, out_dir + "/" + e.name + "_vol");
    write_volume(ph.gt_mask, out_dir + "/" + e.name + "_mask");
    json tree = json::array();
    for (const auto& b : ph.branches) {
      tree.push_back({{"p0", b.p0},
                      {"p1", b.p1},
                      {"radius_mm", b.radius_mm},
                      {"generation", b.generation},
                      {"parent", b.parent},
                      {"clipped", b.clipped}});
    }
    analytic.push_back({{"name", e.name}, {"branches", tree}});
    manifest.entries.push_back(e);
  }
  json j = manifest.to_json();
  j["analytic_trees"] = analytic;
  std::ofstream f(out_dir + "/manifest.json");
  if (!f) throw std::runtime_error("cannot open for write: " + out_dir + "/manifest.json");
  f << j.dump(2) << "\n";
  return manifest;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  json j;
  f >> j;
  return DatasetManifest::from_json(j);
}

}  // namespace airseg
