#include "mdf/model.hpp"

#include <algorithm>
#include <cmath>

namespace mdf {

namespace {

// partial Fisher-Yates draw of k elements, deterministic under the sampler
std::vector<int> sample_k(std::vector<int> pool, size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + static_cast<size_t>(rng.next_u64() % (pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());  // stable order for the loss layout
  return pool;
}

}  // namespace

MdfNet::MdfNet(const ModelConfig& cfg, const NormalizationStats& stats, uint64_t init_seed)
    : cfg_(cfg), stats_(stats) {
  cfg_.validate();
  Rng root(init_seed);
  Rng r_enc = root.fork("encoder"), r_spa = root.fork("spatial"), r_cxr = root.fork("cxr"),
      r_cli = root.fork("clinical"), r_fus = root.fork("fusion"), r_rpn = root.fork("rpn"),
      r_head = root.fork("head");

  const int d = cfg_.backbone.out_channels();
  cxr_backbone_ = Backbone(params_, "cxr", 1, cfg_.backbone, r_cxr);
  if (cfg_.uses_clinical()) {
    encoder_ = ClinicalEncoder(params_, cfg_.features, cfg_.embed_width, r_enc);
    if (stats_.features != encoder_.numerical_features())
      throw std::invalid_argument("normalization stats do not match the configured feature set");
  }
  if (cfg_.use_3d_fusion()) {
    spatial_ = SpatialisationStack(params_, "spatial", encoder_.output_width(), cfg_.spatial_e,
                                   cfg_.spa_channels, 1, r_spa);
    clinical_backbone_ = Backbone(params_, "clinical", 1, cfg_.backbone, r_cli);
    fusion_ = FusionBlock(params_, "fusion", d, cfg_.fusion, r_fus);
  }
  rpn_ = RpnBlock(params_, "rpn", d, cfg_.anchors.per_cell(), r_rpn);
  head_ = RoiHead(params_, "head", d, 7, cfg_.use_1d_fusion() ? encoder_.output_width() : 0,
                  cfg_.head.hidden, cfg_.head.mask_size, r_head);
  uncertainty_ = UncertaintyWeights(params_, "loss");

  const int fm = cfg_.feature_map_size();
  anchors_ = AnchorGrid::build(fm, fm, static_cast<double>(cfg_.backbone.downsample()),
                               cfg_.anchors);
}

Var MdfNet::fused_map(Tape& tape, const Instance& inst, std::optional<Var>* z_out) {
  const Tensor& img = inst.image;
  if (img.ndim() != 4 || img.shape[2] != cfg_.image_size || img.shape[3] != cfg_.image_size)
    throw DimensionError("instance image has shape " + shape_str(img.shape) + ", expected [1,1," +
                         std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "]");
  Var image = tape.input(img);
  Var image_map = cxr_backbone_.forward(tape, image);

  std::optional<Var> z;
  if (cfg_.uses_clinical()) {
    z = encoder_.forward(tape, inst.clinical, stats_);
    ++clinical_reads_;
  }
  Var fused = image_map;
  if (cfg_.use_3d_fusion()) {
    Var pseudo = spatial_.forward(tape, *z);
    Var clinical_map = clinical_backbone_.forward(tape, pseudo);
    fused = fusion_.forward(tape, clinical_map, image_map);
  }
  if (z_out) *z_out = z;
  return fused;
}

MdfNet::ForwardState MdfNet::forward_shared(Tape& tape, const Instance& inst) {
  ForwardState fs;
  fs.fused = fused_map(tape, inst, &fs.z);
  fs.rpn = rpn_.forward(tape, fs.fused);
  return fs;
}

LossResult MdfNet::training_loss(Tape& tape, const Instance& inst, const TrainingPlan* frozen,
                                 Rng* sampler) {
  ForwardState fs = forward_shared(tape, inst);
  const double img_w = cfg_.image_size, img_h = cfg_.image_size;

  TrainingPlan plan;
  if (frozen) {
    plan = *frozen;
  } else {
    if (!sampler) throw std::invalid_argument("training_loss needs a sampler when no frozen plan is given");
    // --- anchor targets: IoU thresholds plus the best anchor per ground truth
    std::vector<Assignment> asg =
        assign_targets(anchors_.boxes, inst.gts, cfg_.rpn.fg_iou, cfg_.rpn.bg_iou);
    for (size_t g = 0; g < inst.gts.size(); ++g) {
      double best = -1.0;
      int best_a = -1;
      for (int a = 0; a < anchors_.count(); ++a) {
        const double iou = box_iou(anchors_.boxes[static_cast<size_t>(a)], inst.gts[g].box);
        if (iou > best) {
          best = iou;
          best_a = a;
        }
      }
      if (best_a >= 0) {
        Assignment& fa = asg[static_cast<size_t>(best_a)];
        fa.label = inst.gts[g].cls + 1;
        fa.gt_index = static_cast<int>(g);
        fa.delta = encode_box(inst.gts[g].box, anchors_.boxes[static_cast<size_t>(best_a)]);
      }
    }
    std::vector<int> pos, neg;
    for (int a = 0; a < anchors_.count(); ++a) {
      if (asg[static_cast<size_t>(a)].label > 0) pos.push_back(a);
      else if (asg[static_cast<size_t>(a)].label == 0) neg.push_back(a);
    }
    const size_t pos_cap = static_cast<size_t>(std::lround(cfg_.rpn.batch * cfg_.rpn.pos_fraction));
    std::vector<int> pos_keep = sample_k(pos, pos_cap, *sampler);
    std::vector<int> neg_keep =
        sample_k(neg, static_cast<size_t>(cfg_.rpn.batch) - pos_keep.size(), *sampler);
    for (int a : pos_keep) {
      plan.anchor_indices.push_back(a);
      plan.anchor_targets.push_back(1.0);
      plan.pos_anchor_indices.push_back(a);
      plan.pos_anchor_deltas.push_back(asg[static_cast<size_t>(a)].delta);
    }
    for (int a : neg_keep) {
      plan.anchor_indices.push_back(a);
      plan.anchor_targets.push_back(0.0);
    }

    // --- proposals, augmented with ground-truth boxes for the head batch
    std::vector<Proposal> proposals =
        generate_proposals(tape.value(fs.rpn.obj_logits), tape.value(fs.rpn.deltas), anchors_,
                           img_w, img_h, cfg_.rpn);
    plan.had_proposals = !proposals.empty();
    std::vector<Box> candidates;
    for (const Proposal& p : proposals) candidates.push_back(p.box);
    for (const GtBox& g : inst.gts) candidates.push_back(g.box);

    std::vector<Assignment> roi_asg =
        assign_targets(candidates, inst.gts, cfg_.head.fg_iou, cfg_.head.bg_iou);
    std::vector<int> roi_pos, roi_neg;
    for (size_t i = 0; i < candidates.size(); ++i) {
      if (roi_asg[i].label > 0) roi_pos.push_back(static_cast<int>(i));
      else if (roi_asg[i].label == 0) roi_neg.push_back(static_cast<int>(i));
    }
    const size_t roi_pos_cap =
        static_cast<size_t>(std::lround(cfg_.head.batch * cfg_.head.pos_fraction));
    std::vector<int> keep_pos = sample_k(roi_pos, roi_pos_cap, *sampler);
    std::vector<int> keep_neg =
        sample_k(roi_neg, static_cast<size_t>(cfg_.head.batch) - keep_pos.size(), *sampler);
    for (int i : keep_pos) {
      const Assignment& a = roi_asg[static_cast<size_t>(i)];
      plan.rois.push_back(candidates[static_cast<size_t>(i)]);
      plan.roi_labels.push_back(a.label);
      plan.roi_deltas.push_back(a.delta);
      plan.roi_mask_targets.push_back(
          rasterize_mask_target(candidates[static_cast<size_t>(i)],
                                inst.gts[static_cast<size_t>(a.gt_index)].box,
                                cfg_.head.mask_size));
    }
    for (int i : keep_neg) {
      plan.rois.push_back(candidates[static_cast<size_t>(i)]);
      plan.roi_labels.push_back(0);
    }
  }

  // --- RPN losses over the planned anchors
  const int64_t hw = static_cast<int64_t>(anchors_.feat_h) * anchors_.feat_w;
  UncertaintyWeights::TermVars terms;
  Var zero = tape.input(Tensor::scalar(0.0));
  if (!plan.anchor_indices.empty()) {
    std::vector<int64_t> flat(plan.anchor_indices.begin(), plan.anchor_indices.end());
    Var obj = tape.gather(fs.rpn.obj_logits, flat);
    Var target = tape.input(
        Tensor::from({static_cast<int>(plan.anchor_targets.size())}, plan.anchor_targets));
    terms.obj_rpn = tape.bce_logits_mean(obj, target);
  } else {
    terms.obj_rpn = zero;
  }
  if (!plan.pos_anchor_indices.empty()) {
    std::vector<int64_t> didx;
    std::vector<double> dtgt;
    for (size_t i = 0; i < plan.pos_anchor_indices.size(); ++i) {
      const int a = plan.pos_anchor_indices[i] / static_cast<int>(hw);
      const int64_t cell = plan.pos_anchor_indices[i] % hw;
      for (int cmp = 0; cmp < 4; ++cmp) didx.push_back((static_cast<int64_t>(4 * a) + cmp) * hw + cell);
      const BoxDelta& d = plan.pos_anchor_deltas[i];
      dtgt.insert(dtgt.end(), {d.dx, d.dy, d.dw, d.dh});
    }
    Var pred = tape.gather(fs.rpn.deltas, didx);
    Var target = tape.input(Tensor::from({static_cast<int>(dtgt.size())}, dtgt));
    terms.bb_rpn = tape.mul_scalar(tape.smooth_l1(pred, target, kSmoothL1Beta),
                                   1.0 / static_cast<double>(plan.pos_anchor_indices.size()));
  } else {
    terms.bb_rpn = zero;
  }

  // --- head losses over the planned RoIs
  const int fm = cfg_.feature_map_size();
  const double scale = static_cast<double>(fm) / img_w;
  const int S = cfg_.head.mask_size;
  if (!plan.rois.empty()) {
    std::vector<Var> cls_rows;
    std::vector<Var> box_parts, mask_parts;
    std::vector<double> box_targets, mask_targets;
    size_t pos_seen = 0;
    for (size_t i = 0; i < plan.rois.size(); ++i) {
      const MapRect rect = roi_footprint(plan.rois[i], fm, fm, scale);
      Var roi = tape.roi_pool(fs.fused, rect.x0, rect.y0, rect.x1, rect.y1, 7, 7);
      HeadVars hv = head_.forward(tape, roi, cfg_.use_1d_fusion() ? fs.z : std::nullopt);
      cls_rows.push_back(hv.cls_logits);
      if (plan.roi_labels[i] > 0) {
        const int cls = plan.roi_labels[i];
        box_parts.push_back(tape.gather(hv.box_deltas, {4 * cls + 0, 4 * cls + 1, 4 * cls + 2,
                                                        4 * cls + 3}));
        const BoxDelta& d = plan.roi_deltas[pos_seen];
        box_targets.insert(box_targets.end(), {d.dx, d.dy, d.dw, d.dh});
        std::vector<int64_t> midx(static_cast<size_t>(S) * S);
        for (int64_t m = 0; m < S * S; ++m)
          midx[static_cast<size_t>(m)] = static_cast<int64_t>(cls - 1) * S * S + m;
        mask_parts.push_back(tape.gather(hv.mask_logits, midx));
        const Tensor& mt = plan.roi_mask_targets[pos_seen];
        mask_targets.insert(mask_targets.end(), mt.data.begin(), mt.data.end());
        ++pos_seen;
      }
    }
    terms.cls = tape.softmax_xent_mean(tape.concat(cls_rows, 0), plan.roi_labels);
    if (!box_parts.empty()) {
      Var pred = box_parts.size() == 1 ? box_parts[0] : tape.concat(box_parts, 0);
      Var target = tape.input(Tensor::from({static_cast<int>(box_targets.size())}, box_targets));
      terms.bb = tape.mul_scalar(tape.smooth_l1(pred, target, kSmoothL1Beta),
                                 1.0 / static_cast<double>(box_parts.size()));
      Var mpred = mask_parts.size() == 1 ? mask_parts[0] : tape.concat(mask_parts, 0);
      Var mtarget = tape.input(Tensor::from({static_cast<int>(mask_targets.size())}, mask_targets));
      terms.mask = tape.bce_logits_mean(mpred, mtarget);
    } else {
      terms.bb = zero;
      terms.mask = zero;
    }
  } else {
    terms.cls = zero;
    terms.bb = zero;
    terms.mask = zero;
  }

  LossResult res;
  res.term_vars = terms;
  res.total = uncertainty_.total(tape, terms);
  res.terms.cls = tape.value(terms.cls)[0];
  res.terms.bb = tape.value(terms.bb)[0];
  res.terms.mask = tape.value(terms.mask)[0];
  res.terms.obj_rpn = tape.value(terms.obj_rpn)[0];
  res.terms.bb_rpn = tape.value(terms.bb_rpn)[0];
  res.terms.no_proposals_warning = !plan.had_proposals;
  res.plan = std::move(plan);
  return res;
}

std::vector<ScoredBox> MdfNet::infer(const Instance& inst) {
  Tape tape;
  ForwardState fs = forward_shared(tape, inst);
  const double img_w = cfg_.image_size, img_h = cfg_.image_size;
  std::vector<Proposal> proposals = generate_proposals(
      tape.value(fs.rpn.obj_logits), tape.value(fs.rpn.deltas), anchors_, img_w, img_h, cfg_.rpn);

  const int fm = cfg_.feature_map_size();
  const double scale = static_cast<double>(fm) / img_w;
  std::vector<std::vector<Proposal>> per_class(kNumClasses);
  std::vector<std::vector<double>> per_class_scores(kNumClasses);
  int emit = 0;
  for (const Proposal& p : proposals) {
    const MapRect rect = roi_footprint(p.box, fm, fm, scale);
    Var roi = tape.roi_pool(fs.fused, rect.x0, rect.y0, rect.x1, rect.y1, 7, 7);
    HeadVars hv = head_.forward(tape, roi, cfg_.use_1d_fusion() ? fs.z : std::nullopt);
    const Tensor probs = tape.value(tape.softmax_rows(hv.cls_logits));
    const Tensor& deltas = tape.value(hv.box_deltas);
    for (int c = 0; c < kNumClasses; ++c) {
      const int slot = c + 1;
      const double score = probs[slot];
      BoxDelta d{deltas[4 * slot + 0], deltas[4 * slot + 1], deltas[4 * slot + 2],
                 deltas[4 * slot + 3]};
      Box b = decode_box(p.box, d, img_w, img_h);
      if (b.w < 1e-6 || b.h < 1e-6) continue;
      per_class[static_cast<size_t>(c)].push_back(Proposal{b, score, emit++});
    }
  }
  std::vector<ScoredBox> dets;
  for (int c = 0; c < kNumClasses; ++c) {
    std::vector<Proposal> kept = nms(per_class[static_cast<size_t>(c)], cfg_.head.nms_thresh);
    for (const Proposal& p : kept) dets.push_back(ScoredBox{c, p.score, p.box, p.index});
  }
  std::sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (static_cast<int>(dets.size()) > cfg_.head.max_dets)
    dets.resize(static_cast<size_t>(cfg_.head.max_dets));
  // re-index in emission order so downstream tie-breaks are stable
  for (size_t i = 0; i < dets.size(); ++i) dets[i].index = static_cast<int>(i);
  return dets;
}

StageProbe MdfNet::probe_stages(const Instance& inst) {
  Tape tape;
  ForwardState fs = forward_shared(tape, inst);
  StageProbe probe;
  if (fs.z) probe.clinical_vector = tape.value(*fs.z);
  probe.rpn_input = tape.value(fs.fused);
  probe.proposals = generate_proposals(tape.value(fs.rpn.obj_logits), tape.value(fs.rpn.deltas),
                                       anchors_, cfg_.image_size, cfg_.image_size, cfg_.rpn);
  return probe;
}

}  // namespace mdf
