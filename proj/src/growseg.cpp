#include "airseg/growseg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "airseg/morphology.hpp"
#include "airseg/rng.hpp"
#include "airseg/treekit.hpp"

namespace airseg {

using nlohmann::json;

std::vector<std::array<int, 3>> terminal_voxels(const Volume3& mask) {
  if (!mask.is_binary()) throw std::invalid_argument("terminal_voxels: mask must be binary");
  if (mask.count_nonzero() == 0) throw std::invalid_argument("terminal_voxels: empty mask");
  const Volume3 centerline = skeletonize(mask);
  const SkeletonTree tree = build_tree(centerline, mask);

  const double max_sp = *std::max_element(mask.spacing.begin(), mask.spacing.end());
  std::vector<size_t> seeds;
  for (const auto& br : tree.branches) {
    if (!br.children.empty()) continue;       // leaves only
    if (br.chain.size() < 3) continue;        // no tubular end (e.g. a blob)
    // tip = distal chain end; for the root branch this also excludes the
    // root end, which is the chain start by construction
    const size_t tip_count = std::min<size_t>(3, br.chain.size());
    for (size_t t = 0; t < tip_count; ++t) {
      const int vid = br.chain[br.chain.size() - 1 - t];
      const auto& tv = tree.voxels[size_t(vid)];
      const double r_mm = tv.diameter_mm / 2.0 + max_sp;
      int lo[3], hi[3];
      for (int a = 0; a < 3; ++a) {
        const int rv = int(std::ceil(r_mm / mask.spacing[size_t(a)]));
        lo[a] = std::max(0, tv.pos[size_t(a)] - rv);
        hi[a] = std::min(mask.dims[size_t(a)] - 1, tv.pos[size_t(a)] + rv);
      }
      for (int z = lo[2]; z <= hi[2]; ++z) {
        for (int y = lo[1]; y <= hi[1]; ++y) {
          for (int x = lo[0]; x <= hi[0]; ++x) {
            if (mask.at(x, y, z) == 0.0f) continue;
            const double dx = (x - tv.pos[0]) * mask.spacing[0];
            const double dy = (y - tv.pos[1]) * mask.spacing[1];
            const double dz = (z - tv.pos[2]) * mask.spacing[2];
            if (dx * dx + dy * dy + dz * dz <= r_mm * r_mm) {
              seeds.push_back(mask.index(x, y, z));
            }
          }
        }
      }
    }
  }
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  std::vector<std::array<int, 3>> out;
  out.reserve(seeds.size());
  for (size_t i : seeds) {
    int x, y, z;
    mask.unravel(i, x, y, z);
    out.push_back({x, y, z});
  }
  return out;
}

GrowResult grow(const Volume3& initial_mask, const Volume3& vol, Classifier& clf, float t_u,
                const GrowOptions& opts) {
  if (!initial_mask.is_binary()) throw std::invalid_argument("grow: initial mask not binary");
  if (initial_mask.count_nonzero() == 0) throw std::invalid_argument("grow: empty initial mask");
  if (initial_mask.dims != vol.dims) throw std::invalid_argument("grow: dims mismatch");

  GrowResult res;
  res.mask = initial_mask;
  res.mask.kind = VolumeKind::Mask;
  auto& mask = res.mask;
  auto& log = res.log;

  std::vector<uint8_t> visited(mask.voxels.size(), 0);  // classifier-evaluated voxels
  Rng shuffle_rng(opts.shuffle_seed);

  auto seeds_of = [&](const Volume3& m) {
    std::vector<size_t> s;
    for (const auto& p : terminal_voxels(m)) s.push_back(m.index(p[0], p[1], p[2]));
    return s;
  };

  std::vector<size_t> stack = seeds_of(mask);
  const int offs[26][3] = {
      {-1, -1, -1}, {0, -1, -1}, {1, -1, -1}, {-1, 0, -1}, {0, 0, -1}, {1, 0, -1},
      {-1, 1, -1},  {0, 1, -1},  {1, 1, -1},  {-1, -1, 0}, {0, -1, 0}, {1, -1, 0},
      {-1, 0, 0},   {1, 0, 0},   {-1, 1, 0},  {0, 1, 0},   {1, 1, 0},  {-1, -1, 1},
      {0, -1, 1},   {1, -1, 1},  {-1, 0, 1},  {0, 0, 1},   {1, 0, 1},  {-1, 1, 1},
      {0, 1, 1},    {1, 1, 1}};

  while (log.rounds < opts.max_rounds) {
    size_t added = 0;
    while (!stack.empty()) {
      // frontier wave: classify all fresh neighbors of the current stack in
      // one batch; acceptance depends only on the voxel's own probability,
      // so this is equivalent to sequential stack processing
      if (opts.shuffle_seed != 0) shuffle_rng.shuffle(stack);
      std::vector<std::array<int, 3>> cands;
      for (size_t si : stack) {
        int x, y, z;
        mask.unravel(si, x, y, z);
        for (auto& o : offs) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!mask.in_bounds(nx, ny, nz)) continue;
          const size_t ni = mask.index(nx, ny, nz);
          if (mask.voxels[ni] != 0.0f || visited[ni]) continue;
          visited[ni] = 1;
          cands.push_back({nx, ny, nz});
        }
      }
      stack.clear();
      if (cands.empty()) break;
      const std::vector<float> probs = clf.classify(vol, cands);
      log.evaluations += cands.size();
      for (size_t i = 0; i < cands.size(); ++i) {
        if (!std::isfinite(probs[i])) {
          throw std::runtime_error("grow: non-finite classifier output at (" +
                                   std::to_string(cands[i][0]) + "," +
                                   std::to_string(cands[i][1]) + "," +
                                   std::to_string(cands[i][2]) + ")");
        }
        if (probs[i] >= t_u) {
          const size_t ni = mask.index(cands[i][0], cands[i][1], cands[i][2]);
          mask.voxels[ni] = 1.0f;
          stack.push_back(ni);
          ++added;
        }
      }
      std::sort(stack.begin(), stack.end());
    }
    log.added_per_round.push_back(added);
    ++log.rounds;
    const size_t n = log.added_per_round.size();
    if (n >= 2 && log.added_per_round[n - 1] == 0 && log.added_per_round[n - 2] == 0) {
      log.stop_reason = "unchanged for two successive updates";
      return res;
    }
    stack = seeds_of(mask);
  }
  log.stop_reason = "max rounds reached";
  return res;
}

json growth_report(const GrowthLog& log) {
  json j;
  j["rounds"] = log.rounds;
  j["added_per_round"] = log.added_per_round;
  j["evaluations"] = log.evaluations;
  j["stop_reason"] = log.stop_reason;
  return j;
}

json growth_log_to_json(const GrowthLog& log) { return growth_report(log); }

}  // namespace airseg
