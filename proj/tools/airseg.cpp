// airseg: coarse-to-fine airway segmentation toolkit.
//
// Stages communicate exclusively through the volume/JSON file formats so
// each one is independently runnable and testable; every run leaves a
// resolved config next to its primary output for reproducibility.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "airseg/evalkit.hpp"
#include "airseg/growseg.hpp"
#include "airseg/mif_cnn.hpp"
#include "airseg/morphology.hpp"
#include "airseg/parallel.hpp"
#include "airseg/phantom.hpp"
#include "airseg/shaperec.hpp"
#include "airseg/treekit.hpp"
#include "airseg/vcn.hpp"
#include "airseg/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace airseg;

namespace {

void write_json(const json& j, const std::string& path) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) {
    fs::create_directories(dir);
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  json j;
  f >> j;
  return j;
}

// every producing run drops a config next to its primary output
void write_config(const std::string& primary_out, const json& cfg) {
  write_json(cfg, primary_out + ".config.json");
}

void ensure_parent(const std::string& path) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) {
    fs::create_directories(dir);
  }
}

struct SplitArg {
  std::array<int, 3> v{0, 0, 0};
};

std::array<int, 3> parse_split(const std::string& s, int n) {
  std::array<int, 3> split{};
  if (s.empty()) {
    split[1] = std::max(1, n / 6);
    split[2] = std::max(1, n / 4);
    split[0] = n - split[1] - split[2];
    return split;
  }
  if (std::sscanf(s.c_str(), "%d/%d/%d", &split[0], &split[1], &split[2]) != 3) {
    throw CLI::ValidationError("--split", "expected train/val/test, e.g. 5/1/2");
  }
  return split;
}

struct ManifestVolumes {
  std::vector<std::string> names;
  std::vector<Volume3> vols, masks;
};

ManifestVolumes load_split(const std::string& dir, const std::string& split) {
  const DatasetManifest manifest = load_manifest(dir + "/manifest.json");
  ManifestVolumes out;
  for (const auto& e : manifest.entries) {
    if (e.split != split) continue;
    out.names.push_back(e.name);
    out.vols.push_back(read_volume(dir + "/" + e.name + "_vol"));
    out.masks.push_back(read_volume(dir + "/" + e.name + "_mask"));
  }
  return out;
}

int cmd_phantom(const std::string& spec_path, const std::string& out_dir, int count,
                int64_t seed, const std::string& split_str) {
  PhantomSpec spec;
  if (!spec_path.empty()) spec = PhantomSpec::from_json(read_json(spec_path));
  if (seed >= 0) spec.seed = uint64_t(seed);
  fs::create_directories(out_dir);
  json cfg{{"command", "phantom"}, {"spec", spec.to_json()}, {"out", out_dir}, {"count", count}};
  if (count <= 1) {
    const Phantom ph = generate(spec);
    write_volume(ph.intensity, out_dir + "/phantom_vol");
    write_volume(ph.gt_mask, out_dir + "/phantom_mask");
    json tree = json::array();
    for (const auto& b : ph.branches) {
      tree.push_back({{"p0", b.p0}, {"p1", b.p1}, {"radius_mm", b.radius_mm},
                      {"generation", b.generation}, {"parent", b.parent},
                      {"clipped", b.clipped}});
    }
    write_json(tree, out_dir + "/phantom_tree.json");
    write_config(out_dir + "/phantom_vol", cfg);
    std::cout << "phantom: wrote " << out_dir << "/phantom_{vol,mask} ("
              << ph.gt_mask.count_nonzero() << " airway voxels)\n";
  } else {
    const auto split = parse_split(split_str, count);
    cfg["split"] = split;
    make_dataset(spec, count, spec.seed, split, out_dir);
    write_config(out_dir + "/manifest.json", cfg);
    std::cout << "phantom: wrote " << count << " volumes + manifest to " << out_dir << "\n";
  }
  return 0;
}

int cmd_sample(const std::string& vol_path, const std::string& mask_path,
               const std::string& out_path, uint64_t seed, int n_pos, int per_band) {
  const Volume3 vol = read_volume(vol_path);
  const Volume3 mask = read_volume(mask_path);
  const Volume3 centerline = skeletonize(mask);
  const SkeletonTree tree = build_tree(centerline, mask);
  const SampleSet set = sample_points(mask, tree, seed, n_pos, per_band);
  ensure_parent(out_path);
  save_sample_set(set, out_path, vol_path, mask_path);
  write_config(out_path, json{{"command", "sample"}, {"vol", vol_path}, {"mask", mask_path},
                              {"out", out_path}, {"seed", seed}, {"n_pos", n_pos},
                              {"per_band", per_band}});
  std::cout << "sample: " << set.positives.size() << " positives, " << set.negatives.size()
            << " negatives -> " << out_path << "\n";
  return 0;
}

int cmd_train_mif(const std::string& data_dir, int epochs, uint64_t seed, float lr,
                  int stride, const std::string& out_path) {
  const ManifestVolumes train = load_split(data_dir, "train");
  const ManifestVolumes val = load_split(data_dir, "val");
  if (train.vols.empty()) throw std::runtime_error("train-mif: no training volumes in " + data_dir);

  std::vector<const Volume3*> vols;
  for (const auto& v : train.vols) vols.push_back(&v);
  const nn::IntensityNorm norm = fit_intensity_norm(vols);

  MifConfig cfg;
  MifModel model(cfg, seed);
  model.norm = norm;

  std::vector<MifSample> train_samples, val_samples;
  for (size_t i = 0; i < train.vols.size(); ++i) {
    auto s = make_mif_samples(train.vols[i], train.masks[i], norm, cfg.patch, stride);
    train_samples.insert(train_samples.end(), std::make_move_iterator(s.begin()),
                         std::make_move_iterator(s.end()));
  }
  for (size_t i = 0; i < val.vols.size(); ++i) {
    auto s = make_mif_samples(val.vols[i], val.masks[i], norm, cfg.patch, stride);
    val_samples.insert(val_samples.end(), std::make_move_iterator(s.begin()),
                       std::make_move_iterator(s.end()));
  }
  std::cout << "train-mif: " << train_samples.size() << " train / " << val_samples.size()
            << " val patches, " << epochs << " epochs\n";
  const MifTrainResult result = train_mif(model, train_samples, val_samples, epochs, lr, seed);
  ensure_parent(out_path);
  model.save(out_path);
  json trace{{"train_loss", result.train_loss}, {"val_loss", result.val_loss},
             {"best_epoch", result.best_epoch}};
  write_json(trace, out_path + ".trace.json");
  write_config(out_path, json{{"command", "train-mif"}, {"data", data_dir},
                              {"epochs", epochs}, {"seed", seed}, {"lr", lr},
                              {"stride", stride}, {"out", out_path}});
  std::cout << "train-mif: final loss " << result.train_loss.back() << ", best epoch "
            << result.best_epoch << " -> " << out_path << "\n";
  return 0;
}

int cmd_train_vcn(const std::vector<std::string>& sample_files, int epochs, float lr,
                  int batch, uint64_t seed, const std::string& out_path) {
  if (sample_files.empty()) throw std::runtime_error("train-vcn: no sample files given");
  std::vector<LoadedSampleSet> sets;
  std::vector<Volume3> vols;
  for (const auto& f : sample_files) {
    sets.push_back(load_sample_set(f));
    vols.push_back(read_volume(sets.back().volume_ref));
  }
  std::vector<const Volume3*> vol_ptrs;
  for (const auto& v : vols) vol_ptrs.push_back(&v);
  const nn::IntensityNorm norm = fit_intensity_norm(vol_ptrs);

  VcnModel model(VcnConfig{}, seed);
  model.norm = norm;
  std::vector<VcnSample> samples;
  for (size_t i = 0; i < sets.size(); ++i) {
    std::vector<SamplePoint> pts = sets[i].set.positives;
    pts.insert(pts.end(), sets[i].set.negatives.begin(), sets[i].set.negatives.end());
    auto s = make_vcn_samples(vols[i], pts, norm);
    samples.insert(samples.end(), std::make_move_iterator(s.begin()),
                   std::make_move_iterator(s.end()));
  }
  std::cout << "train-vcn: " << samples.size() << " samples, " << epochs << " epochs\n";
  const VcnTrainResult result = train_vcn(model, samples, epochs, lr, batch, seed);
  ensure_parent(out_path);
  model.save(out_path);
  json trace{{"epoch_loss", result.epoch_loss}, {"epoch_accuracy", result.epoch_accuracy}};
  write_json(trace, out_path + ".trace.json");
  write_config(out_path, json{{"command", "train-vcn"}, {"samples", sample_files},
                              {"epochs", epochs}, {"lr", lr}, {"batch", batch},
                              {"seed", seed}, {"out", out_path}});
  std::cout << "train-vcn: final loss " << result.epoch_loss.back() << ", accuracy "
            << result.epoch_accuracy.back() << " -> " << out_path << "\n";
  return 0;
}

std::pair<std::string, std::string> split_pair(const std::string& s, const char* flag) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) {
    throw CLI::ValidationError(flag, "expected two comma-separated paths, e.g. prob,mask");
  }
  return {s.substr(0, comma), s.substr(comma + 1)};
}

int cmd_segment(const std::string& model_path, const std::string& in_path,
                const std::string& out_pair, int stride) {
  auto [prob_path, mask_path] = split_pair(out_pair, "--out");
  MifModel model = MifModel::load(model_path);
  const Volume3 vol = read_volume(in_path);
  const MifPrediction pred = predict_volume(model, vol, stride);
  ensure_parent(prob_path);
  ensure_parent(mask_path);
  write_volume(pred.prob, prob_path);
  write_volume(pred.mask, mask_path);
  write_config(prob_path, json{{"command", "segment"}, {"model", model_path},
                               {"in", in_path}, {"out", out_pair}, {"stride", stride}});
  std::cout << "segment: " << pred.mask.count_nonzero() << " mask voxels -> " << mask_path
            << "\n";
  return 0;
}

int cmd_grow(const std::string& model_path, const std::string& init_path,
             const std::string& in_path, float tu, const std::string& out_path,
             const std::string& log_path) {
  VcnModel model = VcnModel::load(model_path);
  const Volume3 init = read_volume(init_path);
  const Volume3 vol = read_volume(in_path);
  VcnClassifier clf(model);
  const GrowResult res = grow(init, vol, clf, tu);
  ensure_parent(out_path);
  write_volume(res.mask, out_path);
  if (!log_path.empty()) write_json(growth_report(res.log), log_path);
  write_config(out_path, json{{"command", "grow"}, {"model", model_path}, {"init", init_path},
                              {"in", in_path}, {"tu", tu}, {"out", out_path},
                              {"log", log_path}});
  std::cout << "grow: +" << (res.mask.count_nonzero() - init.count_nonzero()) << " voxels in "
            << res.log.rounds << " rounds (" << res.log.evaluations << " evaluations)\n";
  return 0;
}

int cmd_reconstruct(const std::string& in_path, const std::string& out_path,
                    const std::string& report_path) {
  const Volume3 seg = read_volume(in_path);
  const Volume3 centerline = skeletonize(seg);
  SkeletonTree tree = build_tree(centerline, seg);
  smooth_diameters(tree);
  ReconstructStats stats;
  const Volume3 recon = reconstruct(tree, seg.dims, seg.spacing, &stats);
  RefineReport rep;
  const Volume3 refined = refine(seg, tree, recon, {}, &rep);
  ensure_parent(out_path);
  write_volume(refined, out_path);
  if (!report_path.empty()) {
    json j = rep.to_json();
    j["clipped_balls"] = stats.clipped_balls;
    write_json(j, report_path);
  }
  write_config(out_path, json{{"command", "reconstruct"}, {"in", in_path},
                              {"out", out_path}, {"report", report_path}});
  std::cout << "reconstruct: " << rep.fill_centers.size() << " fills, " << rep.trimmed.size()
            << " trims -> " << out_path << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& gt_path, bool strip,
                 const std::string& out_path) {
  const Volume3 pred = read_volume(pred_path);
  const Volume3 gt = read_volume(gt_path);
  const EvalReport report = evaluate(pred, gt, strip);
  const json j = report_to_json(report);
  if (!out_path.empty()) {
    write_json(j, out_path);
    write_config(out_path, json{{"command", "evaluate"}, {"pred", pred_path}, {"gt", gt_path},
                                {"strip", strip}, {"out", out_path}});
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_pipeline(const std::string& mif_path, const std::string& vcn_path,
                 const std::string& in_path, const std::string& gt_path, float tu,
                 int stride, const std::string& out_dir) {
  fs::create_directories(out_dir);
  // stage 1: whole-volume segmentation
  MifModel mif = MifModel::load(mif_path);
  const Volume3 vol = read_volume(in_path);
  const MifPrediction pred = predict_volume(mif, vol, stride);
  write_volume(pred.prob, out_dir + "/prob");
  write_volume(pred.mask, out_dir + "/initial_mask");
  std::cout << "pipeline: initial mask " << pred.mask.count_nonzero() << " voxels\n";
  if (pred.mask.count_nonzero() == 0) {
    throw std::runtime_error("pipeline: segmentation produced an empty mask");
  }

  // stage 2: classifier-driven growth from the terminal branches
  VcnModel vcn = VcnModel::load(vcn_path);
  VcnClassifier clf(vcn);
  const GrowResult grown = grow(pred.mask, vol, clf, tu);
  write_volume(grown.mask, out_dir + "/grown");
  write_json(growth_report(grown.log), out_dir + "/growth.json");
  std::cout << "pipeline: grown +" << (grown.mask.count_nonzero() - pred.mask.count_nonzero())
            << " voxels in " << grown.log.rounds << " rounds\n";

  // stage 3: shape reconstruction
  const Volume3 centerline = skeletonize(grown.mask);
  SkeletonTree tree = build_tree(centerline, grown.mask);
  smooth_diameters(tree);
  ReconstructStats stats;
  const Volume3 recon = reconstruct(tree, grown.mask.dims, grown.mask.spacing, &stats);
  RefineReport rep;
  const Volume3 refined = refine(grown.mask, tree, recon, {}, &rep);
  write_volume(refined, out_dir + "/refined");
  json recon_j = rep.to_json();
  recon_j["clipped_balls"] = stats.clipped_balls;
  write_json(recon_j, out_dir + "/recon.json");
  std::cout << "pipeline: refined mask " << refined.count_nonzero() << " voxels\n";

  // stage 4: evaluation (optional)
  if (!gt_path.empty()) {
    const Volume3 gt = read_volume(gt_path);
    const EvalReport whole = evaluate(refined, gt, /*stripped=*/false);
    const EvalReport stripped = evaluate(refined, gt, /*stripped=*/true);
    write_json(report_to_json(whole), out_dir + "/report_whole.json");
    write_json(report_to_json(stripped), out_dir + "/report_stripped.json");
    std::cout << "pipeline: DSC whole " << whole.m.dsc << ", stripped " << stripped.m.dsc
              << "\n";
  }
  write_config(out_dir + "/pipeline", json{{"command", "pipeline"}, {"mif", mif_path},
                                           {"vcn", vcn_path}, {"in", in_path},
                                           {"gt", gt_path}, {"tu", tu}, {"stride", stride},
                                           {"outdir", out_dir}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"airseg: coarse-to-fine airway segmentation toolkit"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker threads (0 = AIRSEG_THREADS env or hardware; results are "
                 "identical for any value)");

  // phantom
  auto* ph = app.add_subcommand("phantom", "generate synthetic airway phantoms");
  std::string ph_spec, ph_out = "phantom_out", ph_split;
  int ph_count = 1;
  int64_t ph_seed = -1;
  ph->add_option("--spec", ph_spec, "phantom spec JSON (defaults used when omitted)");
  ph->add_option("--out", ph_out, "output directory")->required();
  ph->add_option("--count", ph_count, "number of volumes (>1 writes a dataset manifest)");
  ph->add_option("--seed", ph_seed, "seed override");
  ph->add_option("--split", ph_split, "train/val/test counts, e.g. 5/1/2");

  // sample
  auto* sm = app.add_subcommand("sample", "select training sample points from a mask");
  std::string sm_vol, sm_mask, sm_out = "samples.json";
  uint64_t sm_seed = 1;
  int sm_npos = 3000, sm_perband = 600;
  sm->add_option("--vol", sm_vol, "intensity volume")->required();
  sm->add_option("--mask", sm_mask, "ground-truth mask")->required();
  sm->add_option("--out", sm_out, "output sample-set JSON");
  sm->add_option("--seed", sm_seed, "sampling seed");
  sm->add_option("--n-pos", sm_npos, "positive sample count");
  sm->add_option("--per-band", sm_perband, "negatives per distance band");

  // train-mif
  auto* tm = app.add_subcommand("train-mif", "train the segmentation network");
  std::string tm_data, tm_out = "mif.ckpt";
  int tm_epochs = 12, tm_stride = 32;
  uint64_t tm_seed = 1;
  float tm_lr = 1e-4f;
  tm->add_option("--data", tm_data, "dataset directory with manifest.json")->required();
  tm->add_option("--epochs", tm_epochs, "training epochs (<= 200)")->check(CLI::Range(1, 200));
  tm->add_option("--seed", tm_seed, "training seed");
  tm->add_option("--lr", tm_lr, "Adam learning rate");
  tm->add_option("--stride", tm_stride, "training window stride");
  tm->add_option("--out", tm_out, "output checkpoint");

  // train-vcn
  auto* tv = app.add_subcommand("train-vcn", "train the voxel classification network");
  std::vector<std::string> tv_samples;
  std::string tv_out = "vcn.ckpt";
  int tv_epochs = 2, tv_batch = 8;
  float tv_lr = 1e-4f;
  uint64_t tv_seed = 1;
  tv->add_option("--samples", tv_samples, "sample-set JSON files")->required();
  tv->add_option("--epochs", tv_epochs, "training epochs");
  tv->add_option("--lr", tv_lr, "SGD learning rate");
  tv->add_option("--batch", tv_batch, "minibatch size");
  tv->add_option("--seed", tv_seed, "training seed");
  tv->add_option("--out", tv_out, "output checkpoint");

  // segment
  auto* sg = app.add_subcommand("segment", "whole-volume inference");
  std::string sg_model, sg_in, sg_out = "prob,mask";
  int sg_stride = 32;
  sg->add_option("--model", sg_model, "mif checkpoint")->required();
  sg->add_option("--in", sg_in, "input volume")->required();
  sg->add_option("--out", sg_out, "probability,mask output bases (comma separated)");
  sg->add_option("--stride", sg_stride, "sliding-window stride");

  // grow
  auto* gr = app.add_subcommand("grow", "classifier-driven region growing");
  std::string gr_model, gr_init, gr_in, gr_out = "grown", gr_log;
  float gr_tu = 0.8f;
  gr->add_option("--model", gr_model, "vcn checkpoint")->required();
  gr->add_option("--init", gr_init, "initial mask volume")->required();
  gr->add_option("--in", gr_in, "intensity volume")->required();
  gr->add_option("--tu", gr_tu, "acceptance probability threshold");
  gr->add_option("--out", gr_out, "output mask base");
  gr->add_option("--log", gr_log, "growth log JSON");

  // reconstruct
  auto* rc = app.add_subcommand("reconstruct", "shape reconstruction refinement");
  std::string rc_in, rc_out = "refined", rc_report;
  rc->add_option("--in", rc_in, "segmentation mask")->required();
  rc->add_option("--out", rc_out, "refined mask base");
  rc->add_option("--report", rc_report, "fill/trim report JSON");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "overlap metrics");
  std::string ev_pred, ev_gt, ev_out;
  bool ev_strip = false;
  ev->add_option("--pred", ev_pred, "predicted mask")->required();
  ev->add_option("--gt", ev_gt, "ground-truth mask")->required();
  ev->add_flag("--strip", ev_strip, "remove trachea and main bronchus first");
  ev->add_option("--out", ev_out, "report JSON");

  // pipeline
  auto* pl = app.add_subcommand("pipeline", "segment -> grow -> reconstruct -> evaluate");
  std::string pl_mif, pl_vcn, pl_in, pl_gt, pl_out = "pipeline_out";
  float pl_tu = 0.8f;
  int pl_stride = 32;
  pl->add_option("--mif", pl_mif, "mif checkpoint")->required();
  pl->add_option("--vcn", pl_vcn, "vcn checkpoint")->required();
  pl->add_option("--in", pl_in, "input volume")->required();
  pl->add_option("--gt", pl_gt, "ground truth for evaluation (optional)");
  pl->add_option("--tu", pl_tu, "growth acceptance threshold");
  pl->add_option("--stride", pl_stride, "sliding-window stride");
  pl->add_option("--outdir", pl_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors exit 2
  }

  if (threads > 0) ThreadPool::instance().set_threads(threads);

  try {
    if (*ph) return cmd_phantom(ph_spec, ph_out, ph_count, ph_seed, ph_split);
    if (*sm) return cmd_sample(sm_vol, sm_mask, sm_out, sm_seed, sm_npos, sm_perband);
    if (*tm) return cmd_train_mif(tm_data, tm_epochs, tm_seed, tm_lr, tm_stride, tm_out);
    if (*tv) return cmd_train_vcn(tv_samples, tv_epochs, tv_lr, tv_batch, tv_seed, tv_out);
    if (*sg) return cmd_segment(sg_model, sg_in, sg_out, sg_stride);
    if (*gr) return cmd_grow(gr_model, gr_init, gr_in, gr_tu, gr_out, gr_log);
    if (*rc) return cmd_reconstruct(rc_in, rc_out, rc_report);
    if (*ev) return cmd_evaluate(ev_pred, ev_gt, ev_strip, ev_out);
    if (*pl) return cmd_pipeline(pl_mif, pl_vcn, pl_in, pl_gt, pl_tu, pl_stride, pl_out);
  } catch (const std::exception& e) {
    std::cerr << "airseg: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
