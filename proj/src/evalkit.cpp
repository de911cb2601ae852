#include "airseg/evalkit.hpp"

#include <stdexcept>

namespace airseg {

using nlohmann::json;

Confusion confusion(const Volume3& pred, const Volume3& gt) {
  if (pred.dims != gt.dims) throw std::invalid_argument("confusion: dims mismatch");
  Confusion c;
  for (size_t i = 0; i < pred.voxels.size(); ++i) {
    const bool p = pred.voxels[i] != 0.0f;
    const bool g = gt.voxels[i] != 0.0f;
    if (p && g) ++c.tp;
    else if (p && !g) ++c.fp;
    else if (!p && g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

double ratio(size_t num, size_t den, size_t err_count, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return err_count == 0 ? 1.0 : 0.0;
  }
  return double(num) / double(den);
}

}  // namespace

Metrics metrics(const Confusion& c) {
  Metrics m;
  m.dsc = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c.fp + c.fn, m.dsc_degenerate);
  m.fpr = ratio(c.fp, c.fp + c.tn, c.fp, m.fpr_degenerate);
  m.sen = ratio(c.tp, c.tp + c.fn, c.fn, m.sen_degenerate);
  m.pre = ratio(c.tp, c.tp + c.fp, c.fp, m.pre_degenerate);
  return m;
}

Volume3 strip_trachea_main(const Volume3& mask, const SkeletonTree& tree) {
  if (tree.empty()) throw std::invalid_argument("strip_trachea_main: empty tree");
  if (tree.branches[0].generation != 0) {
    throw std::invalid_argument("strip_trachea_main: tree has no generation-0 branch");
  }
  std::vector<std::array<int, 3>> fg;
  std::vector<size_t> fg_idx;
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    if (mask.voxels[i] != 0.0f) {
      int x, y, z;
      mask.unravel(i, x, y, z);
      fg.push_back({x, y, z});
      fg_idx.push_back(i);
    }
  }
  const std::vector<int> owner = nearest_centerline(tree, fg);
  Volume3 out = mask;
  for (size_t q = 0; q < fg.size(); ++q) {
    const int branch = tree.voxel_branch[size_t(owner[q])];
    if (tree.branches[size_t(branch)].generation <= 1) out.voxels[fg_idx[q]] = 0.0f;
  }
  return out;
}

EvalReport evaluate(const Volume3& pred, const Volume3& gt, bool stripped) {
  EvalReport r;
  if (stripped) {
    const Volume3 centerline = skeletonize(gt);
    const SkeletonTree tree = build_tree(centerline, gt);
    const Volume3 p = strip_trachea_main(pred, tree);
    const Volume3 g = strip_trachea_main(gt, tree);
    r.counts = confusion(p, g);
    r.mode = "stripped";
  } else {
    r.counts = confusion(pred, gt);
    r.mode = "whole";
  }
  r.m = metrics(r.counts);
  return r;
}

json report_to_json(const EvalReport& r) {
  json j;
  j["mode"] = r.mode;
  j["counts"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn},
                 {"tn", r.counts.tn}};
  j["metrics"] = {{"dsc", r.m.dsc}, {"fpr", r.m.fpr}, {"sen", r.m.sen}, {"pre", r.m.pre}};
  json flags = json::array();
  if (r.m.dsc_degenerate) flags.push_back("dsc");
  if (r.m.fpr_degenerate) flags.push_back("fpr");
  if (r.m.sen_degenerate) flags.push_back("sen");
  if (r.m.pre_degenerate) flags.push_back("pre");
  j["degenerate"] = flags;
  return j;
}

}  // namespace airseg
