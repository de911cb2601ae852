#include "airseg/treekit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>

#include <json.hpp>

#include "airseg/morphology.hpp"
#include "airseg/parallel.hpp"
#include "airseg/rng.hpp"

namespace airseg {

using nlohmann::json;

std::string to_string(BranchType t) {
  switch (t) {
    case BranchType::TracheaMain: return "trachea/main";
    case BranchType::Lobar: return "lobar";
    case BranchType::Segmental: return "segmental";
    case BranchType::Subsegmental: return "subsegmental";
  }
  return "trachea/main";
}

namespace {

// 26-neighborhood offsets in fixed (z,y,x) scan order
std::array<std::array<int, 3>, 26> n26_offsets() {
  std::array<std::array<int, 3>, 26> offs{};
  int i = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (dx || dy || dz) offs[size_t(i++)] = {dx, dy, dz};
  return offs;
}
const auto kN26 = n26_offsets();

// --- simple point test (26-connectivity for foreground, 6 for background) --

// Local 3x3x3 cube indexing: cell = (dx+1) + 3*(dy+1) + 9*(dz+1), center 13.
inline int cube_index(int dx, int dy, int dz) { return (dx + 1) + 3 * (dy + 1) + 9 * (dz + 1); }

// Number of 26-components of foreground among the 26 neighbors.
int count_fg_components(const bool fg[27]) {
  bool seen[27] = {};
  int comps = 0;
  int stack[27];
  for (int c = 0; c < 27; ++c) {
    if (c == 13 || !fg[c] || seen[c]) continue;
    ++comps;
    int top = 0;
    stack[top++] = c;
    seen[c] = true;
    while (top) {
      const int cur = stack[--top];
      const int cx = cur % 3, cy = (cur / 3) % 3, cz = cur / 9;
      for (int dz = -1; dz <= 1; ++dz) {
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int nx = cx + dx, ny = cy + dy, nz = cz + dz;
            if (nx < 0 || ny < 0 || nz < 0 || nx > 2 || ny > 2 || nz > 2) continue;
            const int n = nx + 3 * ny + 9 * nz;
            if (n == 13 || n == cur || !fg[n] || seen[n]) continue;
            seen[n] = true;
            stack[top++] = n;
          }
        }
      }
    }
  }
  return comps;
}

// Number of 6-components of background within the 18-neighborhood that touch
// a face neighbor of the center.
int count_bg_components(const bool fg[27]) {
  auto in18 = [](int c) {
    const int dx = c % 3 - 1, dy = (c / 3) % 3 - 1, dz = c / 9 - 1;
    const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
    return manhattan >= 1 && manhattan <= 2;
  };
  auto is_face = [](int c) {
    const int dx = c % 3 - 1, dy = (c / 3) % 3 - 1, dz = c / 9 - 1;
    return std::abs(dx) + std::abs(dy) + std::abs(dz) == 1;
  };
  bool seen[27] = {};
  int comps = 0;
  int stack[27];
  for (int c = 0; c < 27; ++c) {
    if (!in18(c) || fg[c] || seen[c] || !is_face(c)) continue;
    // grow the component from a face neighbor
    ++comps;
    int top = 0;
    stack[top++] = c;
    seen[c] = true;
    while (top) {
      const int cur = stack[--top];
      const int cx = cur % 3, cy = (cur / 3) % 3, cz = cur / 9;
      const int face_offs[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0},
                                   {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
      for (auto& o : face_offs) {
        const int nx = cx + o[0], ny = cy + o[1], nz = cz + o[2];
        if (nx < 0 || ny < 0 || nz < 0 || nx > 2 || ny > 2 || nz > 2) continue;
        const int n = nx + 3 * ny + 9 * nz;
        if (n == 13 || !in18(n) || fg[n] || seen[n]) continue;
        seen[n] = true;
        stack[top++] = n;
      }
    }
  }
  return comps;
}

// A foreground voxel is simple iff deleting it preserves the topology of
// both phases: exactly one 26-component of foreground neighbors and exactly
// one 6-component of background in the 18-neighborhood.
bool is_simple(const Volume3& vol, int x, int y, int z) {
  bool fg[27];
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx, ny = y + dy, nz = z + dz;
        fg[cube_index(dx, dy, dz)] =
            vol.in_bounds(nx, ny, nz) && vol.at(nx, ny, nz) != 0.0f;
      }
    }
  }
  return count_fg_components(fg) == 1 && count_bg_components(fg) == 1;
}

int count_fg_neighbors(const Volume3& vol, int x, int y, int z) {
  int n = 0;
  for (auto& o : kN26) {
    const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
    if (vol.in_bounds(nx, ny, nz) && vol.at(nx, ny, nz) != 0.0f) ++n;
  }
  return n;
}

// Distance-ordered homotopic thinning: delete simple, non-endpoint voxels in
// increasing boundary-distance order until stable.
void thin_in_place(Volume3& fg, const Volume3& edt) {
  using Entry = std::pair<float, int64_t>;  // (distance, linear index)
  std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> heap;
  for (size_t i = 0; i < fg.voxels.size(); ++i) {
    if (fg.voxels[i] != 0.0f) heap.emplace(edt.voxels[i], int64_t(i));
  }
  while (!heap.empty()) {
    const auto [d, li] = heap.top();
    heap.pop();
    const size_t i = size_t(li);
    if (fg.voxels[i] == 0.0f) continue;
    int x, y, z;
    fg.unravel(i, x, y, z);
    if (count_fg_neighbors(fg, x, y, z) == 1) continue;  // curve endpoint
    if (!is_simple(fg, x, y, z)) continue;
    fg.voxels[i] = 0.0f;
    for (auto& o : kN26) {
      const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
      if (fg.in_bounds(nx, ny, nz) && fg.at(nx, ny, nz) != 0.0f) {
        heap.emplace(edt.at(nx, ny, nz), int64_t(fg.index(nx, ny, nz)));
      }
    }
  }
}

// Removes leaf chains that are shorter than the local tube radius at their
// junction (thinning artifacts at thick caps and junction bulges).
void prune_spurs(Volume3& skel, const Volume3& edt) {
  for (;;) {
    std::vector<size_t> kill;
    for (size_t i = 0; i < skel.voxels.size(); ++i) {
      if (skel.voxels[i] == 0.0f) continue;
      int x, y, z;
      skel.unravel(i, x, y, z);
      if (count_fg_neighbors(skel, x, y, z) != 1) continue;  // endpoints only
      // walk the chain inward until a junction
      std::vector<size_t> chain{i};
      int px = x, py = y, pz = z;
      int cx = x, cy = y, cz = z;
      bool junction_found = false;
      size_t junction = 0;
      for (;;) {
        int nx_ = -1, ny_ = -1, nz_ = -1;
        int next_count = 0;
        for (auto& o : kN26) {
          const int qx = cx + o[0], qy = cy + o[1], qz = cz + o[2];
          if (!skel.in_bounds(qx, qy, qz) || skel.at(qx, qy, qz) == 0.0f) continue;
          if (qx == px && qy == py && qz == pz) continue;
          ++next_count;
          nx_ = qx;
          ny_ = qy;
          nz_ = qz;
        }
        if (next_count != 1) break;  // endpoint or dead end
        const int deg = count_fg_neighbors(skel, nx_, ny_, nz_);
        if (deg >= 3) {
          junction_found = true;
          junction = skel.index(nx_, ny_, nz_);
          break;
        }
        chain.push_back(skel.index(nx_, ny_, nz_));
        px = cx; py = cy; pz = cz;
        cx = nx_; cy = ny_; cz = nz_;
      }
      if (!junction_found) continue;
      const double threshold = std::ceil(edt.voxels[junction]) + 2.0;
      if (double(chain.size()) <= threshold) {
        kill.insert(kill.end(), chain.begin(), chain.end());
      }
    }
    if (kill.empty()) break;
    for (size_t i : kill) skel.voxels[i] = 0.0f;
  }
}

}  // namespace

Volume3 skeletonize(const Volume3& mask) {
  if (!mask.is_binary()) throw std::invalid_argument("skeletonize: mask must be binary");
  if (mask.count_nonzero() == 0) throw std::invalid_argument("skeletonize: empty mask");
  Components comps = connected_components(mask, 26);
  Volume3 fg = mask;
  fg.kind = VolumeKind::Mask;
  if (comps.sizes.size() > 1) {
    std::cerr << "[airseg] skeletonize: mask has " << comps.sizes.size()
              << " components; taking the largest\n";
    fg = largest_component(mask, 26);
  }
  const Volume3 edt = distance_to_background(fg, /*spacing_aware=*/false);
  thin_in_place(fg, edt);
  prune_spurs(fg, edt);
  return fg;
}

namespace {

struct VoxelGraph {
  std::vector<std::array<int, 3>> pos;           // sorted by linear index
  std::vector<std::vector<int>> adj;             // spanning-tree adjacency
  std::vector<int> degree;
};

// Builds the voxel graph of the centerline; cycles (rare, junction cliques
// or pathological input) are broken at their smallest-diameter edge by
// taking the maximum spanning tree on min-endpoint-radius weights.
VoxelGraph build_voxel_graph(const Volume3& centerline, const Volume3& edt_mm) {
  VoxelGraph g;
  std::vector<int> id_of(centerline.voxels.size(), -1);
  for (size_t i = 0; i < centerline.voxels.size(); ++i) {
    if (centerline.voxels[i] != 0.0f) {
      id_of[i] = int(g.pos.size());
      int x, y, z;
      centerline.unravel(i, x, y, z);
      g.pos.push_back({x, y, z});
    }
  }
  struct Edge {
    double w;
    int a, b;
  };
  std::vector<Edge> edges;
  for (size_t vi = 0; vi < g.pos.size(); ++vi) {
    const auto [x, y, z] = g.pos[vi];
    for (auto& o : kN26) {
      const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
      if (!centerline.in_bounds(nx, ny, nz)) continue;
      const int nj = id_of[centerline.index(nx, ny, nz)];
      if (nj < 0 || nj <= int(vi)) continue;  // each edge once
      const double w = std::min(edt_mm.at(x, y, z), edt_mm.at(nx, ny, nz));
      edges.push_back({w, int(vi), nj});
    }
  }
  const size_t n = g.pos.size();
  g.adj.assign(n, {});
  g.degree.assign(n, 0);
  // Kruskal, heaviest first; ties by (a,b) for determinism
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
    if (l.w != r.w) return l.w > r.w;
    if (l.a != r.a) return l.a < r.a;
    return l.b < r.b;
  });
  std::vector<int> dsu(n);
  std::iota(dsu.begin(), dsu.end(), 0);
  std::function<int(int)> find = [&](int v) {
    while (dsu[size_t(v)] != v) {
      dsu[size_t(v)] = dsu[size_t(dsu[size_t(v)])];
      v = dsu[size_t(v)];
    }
    return v;
  };
  size_t dropped = 0;
  for (const auto& e : edges) {
    const int ra = find(e.a), rb = find(e.b);
    if (ra == rb) {
      ++dropped;
      continue;
    }
    dsu[size_t(ra)] = rb;
    g.adj[size_t(e.a)].push_back(e.b);
    g.adj[size_t(e.b)].push_back(e.a);
  }
  if (dropped > 0) {
    std::cerr << "[airseg] build_tree: centerline contained " << dropped
              << " cycle edge(s); broken at smallest diameter\n";
  }
  for (size_t v = 0; v < n; ++v) {
    std::sort(g.adj[v].begin(), g.adj[v].end());
    g.degree[v] = int(g.adj[v].size());
  }
  return g;
}

bool pos_less(const std::array<int, 3>& a, const std::array<int, 3>& b) {
  if (a[2] != b[2]) return a[2] < b[2];
  if (a[1] != b[1]) return a[1] < b[1];
  return a[0] < b[0];
}

}  // namespace

SkeletonTree build_tree(const Volume3& centerline, const Volume3& mask) {
  if (!centerline.is_binary()) throw std::invalid_argument("build_tree: centerline not binary");
  if (centerline.count_nonzero() == 0) throw std::invalid_argument("build_tree: empty centerline");
  const Volume3 edt_mm = distance_to_background(mask, /*spacing_aware=*/true);
  VoxelGraph g = build_voxel_graph(centerline, edt_mm);
  const size_t n = g.pos.size();

  // root: endpoint at the largest-z end (trachea enters from the top)
  int root = -1;
  for (size_t v = 0; v < n; ++v) {
    if (g.degree[v] > 1) continue;
    if (root < 0 || g.pos[v][2] > g.pos[size_t(root)][2] ||
        (g.pos[v][2] == g.pos[size_t(root)][2] && pos_less(g.pos[v], g.pos[size_t(root)]))) {
      root = int(v);
    }
  }
  if (root < 0) root = 0;  // no endpoints (tiny cluster): arbitrary but fixed

  SkeletonTree tree;
  tree.dims = centerline.dims;
  tree.spacing = centerline.spacing;
  tree.voxels.resize(n);
  for (size_t v = 0; v < n; ++v) {
    tree.voxels[v].pos = g.pos[v];
    tree.voxels[v].diameter_mm =
        2.0 * edt_mm.at(g.pos[v][0], g.pos[v][1], g.pos[v][2]);
    tree.voxels[v].smoothed_mm = tree.voxels[v].diameter_mm;
  }
  tree.voxel_branch.assign(n, -1);

  std::vector<char> visited(n, 0);
  auto is_junction = [&](int v) { return g.degree[size_t(v)] >= 3; };

  struct Pending {
    int start;
    int parent_branch;
  };
  std::vector<Pending> pending{{root, -1}};
  visited[size_t(root)] = 1;

  while (!pending.empty()) {
    const Pending work = pending.back();
    pending.pop_back();
    const int bid = int(tree.branches.size());
    tree.branches.emplace_back();
    auto& br = tree.branches.back();
    br.parent = work.parent_branch;
    if (work.parent_branch >= 0) {
      tree.branches[size_t(work.parent_branch)].children.push_back(bid);
    }
    br.chain.push_back(work.start);
    tree.voxel_branch[size_t(work.start)] = bid;
    int cur = work.start;
    for (;;) {
      // unvisited neighbors of the chain head
      int next = -1;
      for (int nb : g.adj[size_t(cur)]) {
        if (!visited[size_t(nb)]) {
          next = nb;
          break;
        }
      }
      if (next < 0) break;  // endpoint
      if (!is_junction(next)) {
        visited[size_t(next)] = 1;
        br.chain.push_back(next);
        tree.voxel_branch[size_t(next)] = bid;
        cur = next;
        continue;
      }
      // absorb the whole junction cluster into this branch, then spawn a
      // child branch per outgoing non-junction voxel
      std::vector<int> cluster;
      std::vector<int> frontier{next};
      visited[size_t(next)] = 1;
      while (!frontier.empty()) {
        std::sort(frontier.begin(), frontier.end(), [&](int a, int b) {
          return pos_less(g.pos[size_t(a)], g.pos[size_t(b)]);
        });
        std::vector<int> fresh;
        for (int jv : frontier) {
          cluster.push_back(jv);
          for (int nb : g.adj[size_t(jv)]) {
            if (!visited[size_t(nb)] && is_junction(nb)) {
              visited[size_t(nb)] = 1;
              fresh.push_back(nb);
            }
          }
        }
        frontier = std::move(fresh);
      }
      std::vector<int> child_starts;
      for (int jv : cluster) {
        br.chain.push_back(jv);
        tree.voxel_branch[size_t(jv)] = bid;
        for (int nb : g.adj[size_t(jv)]) {
          if (!visited[size_t(nb)]) child_starts.push_back(nb);
        }
      }
      std::sort(child_starts.begin(), child_starts.end(), [&](int a, int b) {
        return pos_less(g.pos[size_t(a)], g.pos[size_t(b)]);
      });
      child_starts.erase(std::unique(child_starts.begin(), child_starts.end()),
                         child_starts.end());
      // push in reverse so lexicographically smallest is processed first
      for (auto it = child_starts.rbegin(); it != child_starts.rend(); ++it) {
        if (visited[size_t(*it)]) continue;
        visited[size_t(*it)] = 1;
        pending.push_back({*it, bid});
      }
      break;  // branch ends at the junction cluster
    }
  }

  size_t unreachable = 0;
  for (size_t v = 0; v < n; ++v) unreachable += (tree.voxel_branch[v] < 0);
  if (unreachable > 0) {
    std::cerr << "[airseg] build_tree: " << unreachable
              << " centerline voxel(s) outside the root component were ignored\n";
  }

  // prune short childless leaves, merging pass-through branches afterwards
  std::vector<char> removed(tree.branches.size(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (size_t b = 0; b < tree.branches.size(); ++b) {
      auto& br = tree.branches[b];
      if (removed[b] || int(b) == 0) continue;
      if (br.children.empty() && br.chain.size() < 3) {
        removed[b] = 1;
        auto& sibs = tree.branches[size_t(br.parent)].children;
        sibs.erase(std::remove(sibs.begin(), sibs.end(), int(b)), sibs.end());
        changed = true;
      }
    }
    for (size_t b = 0; b < tree.branches.size(); ++b) {
      auto& br = tree.branches[b];
      if (removed[b] || br.children.size() != 1) continue;
      const int c = br.children[0];
      auto& child = tree.branches[size_t(c)];
      br.chain.insert(br.chain.end(), child.chain.begin(), child.chain.end());
      br.children = child.children;
      for (int gc : br.children) tree.branches[size_t(gc)].parent = int(b);
      child.chain.clear();
      child.children.clear();
      removed[size_t(c)] = 1;
      changed = true;
    }
  }

  // compact: drop removed branches and orphaned voxels
  SkeletonTree out;
  out.dims = tree.dims;
  out.spacing = tree.spacing;
  std::vector<int> branch_map(tree.branches.size(), -1);
  std::vector<int> voxel_map(n, -1);
  for (size_t b = 0; b < tree.branches.size(); ++b) {
    if (removed[b]) continue;
    branch_map[b] = int(out.branches.size());
    out.branches.push_back(tree.branches[b]);
  }
  for (auto& br : out.branches) {
    if (br.parent >= 0) br.parent = branch_map[size_t(br.parent)];
    for (auto& c : br.children) c = branch_map[size_t(c)];
    for (auto& v : br.chain) {
      if (voxel_map[size_t(v)] < 0) {
        voxel_map[size_t(v)] = int(out.voxels.size());
        out.voxels.push_back(tree.voxels[size_t(v)]);
      }
      v = voxel_map[size_t(v)];
    }
  }
  out.voxel_branch.assign(out.voxels.size(), -1);
  for (size_t b = 0; b < out.branches.size(); ++b) {
    for (int v : out.branches[b].chain) out.voxel_branch[size_t(v)] = int(b);
  }
  out.root_branch = out.branches.empty() ? -1 : 0;

  // generations by depth from the root, then diameters and types
  if (!out.branches.empty()) {
    std::vector<int> stack{0};
    out.branches[0].generation = 0;
    while (!stack.empty()) {
      const int b = stack.back();
      stack.pop_back();
      for (int c : out.branches[size_t(b)].children) {
        out.branches[size_t(c)].generation = out.branches[size_t(b)].generation + 1;
        stack.push_back(c);
      }
    }
  }
  for (auto& br : out.branches) {
    double sum = 0.0;
    for (int v : br.chain) sum += out.voxels[size_t(v)].diameter_mm;
    br.diameter_mm = br.chain.empty() ? 0.0 : sum / double(br.chain.size());
  }
  classify_branches(out);
  return out;
}

double voxel_diameter(const Volume3& mask, std::array<int, 3> voxel) {
  if (!mask.in_bounds(voxel[0], voxel[1], voxel[2]) ||
      mask.at(voxel[0], voxel[1], voxel[2]) == 0.0f) {
    throw std::invalid_argument("voxel_diameter: voxel outside mask");
  }
  const Volume3 edt = distance_to_background(mask, /*spacing_aware=*/true);
  return 2.0 * edt.at(voxel[0], voxel[1], voxel[2]);
}

double branch_diameter(const SkeletonTree& tree, int branch) {
  if (branch < 0 || branch >= int(tree.branches.size())) {
    throw std::invalid_argument("branch_diameter: no such branch");
  }
  const auto& br = tree.branches[size_t(branch)];
  if (br.chain.empty()) throw std::invalid_argument("branch_diameter: empty branch");
  double sum = 0.0;
  for (int v : br.chain) sum += tree.voxels[size_t(v)].diameter_mm;
  return sum / double(br.chain.size());
}

void classify_branches(SkeletonTree& tree) {
  for (auto& br : tree.branches) {
    if (br.generation <= 1) {
      br.type = BranchType::TracheaMain;
    } else if (br.generation == 2) {
      br.type = BranchType::Lobar;
    } else if (br.generation == 3) {
      br.type = BranchType::Segmental;
    } else {
      br.type = BranchType::Subsegmental;
    }
  }
}

Subsets subsets(const SkeletonTree& tree) {
  Subsets s;
  for (size_t b = 0; b < tree.branches.size(); ++b) {
    s.s1.push_back(int(b));
    const auto& br = tree.branches[b];
    if (br.type == BranchType::Subsegmental ||
        (br.type == BranchType::Segmental && br.diameter_mm < 2.0)) {
      s.s2.push_back(int(b));
    }
  }
  return s;
}

std::vector<int> nearest_centerline(const SkeletonTree& tree,
                                    const std::vector<std::array<int, 3>>& queries) {
  std::vector<int> result(queries.size(), -1);
  const auto& sp = tree.spacing;
  const int nchunks = std::min<int>(16, std::max<int>(1, int(queries.size())));
  parallel_for(nchunks, [&](int c) {
    for (size_t q = size_t(c); q < queries.size(); q += size_t(nchunks)) {
      const auto& p = queries[q];
      double best = std::numeric_limits<double>::max();
      int best_i = -1;
      for (size_t v = 0; v < tree.voxels.size(); ++v) {
        const auto& t = tree.voxels[v].pos;
        const double dx = (p[0] - t[0]) * sp[0];
        const double dy = (p[1] - t[1]) * sp[1];
        const double dz = (p[2] - t[2]) * sp[2];
        const double d = dx * dx + dy * dy + dz * dz;
        if (d < best) {
          best = d;
          best_i = int(v);
        }
      }
      result[q] = best_i;
    }
  });
  return result;
}

namespace {

uint64_t derive_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// k positions sampled uniformly; falls back to replacement with a warning
// when there are fewer candidates than requested.
std::vector<std::array<int, 3>> sample_from(const std::vector<std::array<int, 3>>& cands,
                                            size_t k, Rng& rng, const char* what) {
  std::vector<std::array<int, 3>> out;
  out.reserve(k);
  if (cands.size() >= k) {
    std::vector<size_t> idx(cands.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    for (size_t i = 0; i < k; ++i) {
      const size_t j = i + size_t(rng.uniform_int(idx.size() - i));
      std::swap(idx[i], idx[j]);
      out.push_back(cands[idx[i]]);
    }
  } else {
    std::cerr << "[airseg] sample_points: " << what << " has " << cands.size()
              << " candidates for quota " << k << "; sampling with replacement\n";
    for (size_t i = 0; i < k; ++i) {
      out.push_back(cands[size_t(rng.uniform_int(cands.size()))]);
    }
  }
  return out;
}

}  // namespace

SampleSet sample_points(const Volume3& mask, const SkeletonTree& tree, uint64_t seed,
                        int n_pos, int per_band) {
  if (!mask.is_binary()) throw std::invalid_argument("sample_points: mask must be binary");
  const Subsets sub = subsets(tree);
  if (sub.s2.empty()) throw std::invalid_argument("sample_points: S2 subset is empty");
  std::vector<char> in_s2(tree.branches.size(), 0);
  for (int b : sub.s2) in_s2[size_t(b)] = 1;

  // airway voxels assigned to branches via nearest centerline voxel
  std::vector<std::array<int, 3>> airway;
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    if (mask.voxels[i] != 0.0f) {
      int x, y, z;
      mask.unravel(i, x, y, z);
      airway.push_back({x, y, z});
    }
  }
  const std::vector<int> owner = nearest_centerline(tree, airway);
  std::vector<std::array<int, 3>> pos_cands;
  for (size_t i = 0; i < airway.size(); ++i) {
    if (owner[i] >= 0 && in_s2[size_t(tree.voxel_branch[size_t(owner[i])])]) {
      pos_cands.push_back(airway[i]);
    }
  }
  if (pos_cands.empty()) {
    throw std::invalid_argument("sample_points: S2 region contains no airway voxels");
  }

  SampleSet set;
  {
    Rng rng(derive_seed(seed, 0));
    for (const auto& p : sample_from(pos_cands, size_t(n_pos), rng, "S2 positives")) {
      set.positives.push_back({p, 1, 0});
    }
  }

  // negatives by ceiling-rounded Euclidean distance band (voxel units); the
  // EDT of small integers is exact, so ceil is safe here
  const Volume3 edt = distance_transform(mask, /*spacing_aware=*/false);
  std::array<std::vector<std::array<int, 3>>, 5> band_cands;
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    if (mask.voxels[i] != 0.0f) continue;
    const int k = int(std::ceil(double(edt.voxels[i])));
    for (size_t b = 0; b < kNegativeBands.size(); ++b) {
      if (k >= kNegativeBands[b][0] && k <= kNegativeBands[b][1]) {
        int x, y, z;
        mask.unravel(i, x, y, z);
        band_cands[b].push_back({x, y, z});
        break;
      }
    }
  }
  for (size_t b = 0; b < kNegativeBands.size(); ++b) {
    if (band_cands[b].empty()) {
      throw std::invalid_argument("sample_points: band [" +
                                  std::to_string(kNegativeBands[b][0]) + "," +
                                  std::to_string(kNegativeBands[b][1]) +
                                  "] has no candidates");
    }
    Rng rng(derive_seed(seed, b + 1));
    const std::string what = "band [" + std::to_string(kNegativeBands[b][0]) + "," +
                             std::to_string(kNegativeBands[b][1]) + "]";
    for (const auto& p : sample_from(band_cands[b], size_t(per_band), rng, what.c_str())) {
      set.negatives.push_back({p, 0, int(b) + 1});
    }
  }
  return set;
}

void save_sample_set(const SampleSet& set, const std::string& path,
                     const std::string& volume_ref, const std::string& mask_ref) {
  json doc;
  doc["volume"] = volume_ref;
  doc["mask"] = mask_ref;
  json pts = json::array();
  for (const auto& p : set.positives) {
    pts.push_back({{"point", {p.pos[0], p.pos[1], p.pos[2]}}, {"label", 1}});
  }
  for (const auto& p : set.negatives) {
    pts.push_back({{"point", {p.pos[0], p.pos[1], p.pos[2]}}, {"label", 0}, {"band", p.band}});
  }
  doc["points"] = pts;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << doc.dump() << "\n";
}

LoadedSampleSet load_sample_set(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  json doc;
  f >> doc;
  LoadedSampleSet out;
  out.volume_ref = doc.value("volume", "");
  out.mask_ref = doc.value("mask", "");
  for (const auto& e : doc.at("points")) {
    SamplePoint p;
    const auto& pt = e.at("point");
    p.pos = {pt.at(0).get<int>(), pt.at(1).get<int>(), pt.at(2).get<int>()};
    p.label = e.at("label").get<int>();
    p.band = e.value("band", 0);
    if (p.label == 1) {
      out.set.positives.push_back(p);
    } else {
      out.set.negatives.push_back(p);
    }
  }
  return out;
}

}  // namespace airseg
