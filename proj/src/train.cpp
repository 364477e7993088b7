// Copyright 2026 The tkd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "tkd/train.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tkd/optim.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written little-endian");

namespace tkd::train {

namespace fs = std::filesystem;

json TrainConfig::to_json() const {
    return json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"lr_drop_epoch", lr_drop_epoch},
                {"lr_drop_factor", lr_drop_factor},
                {"max_steps", max_steps},
                {"seed", seed},
                {"lambda_corr", weights.lambda_corr},
                {"lambda_axis", weights.lambda_axis},
                {"articulation_prior", articulation_prior},
                {"stopgrad_keypoints", stopgrad_keypoints},
                {"stopgrad_fit", stopgrad_fit},
                {"n_pos", n_pos},
                {"n_neg", n_neg},
                {"augment", augment},
                {"aug_rotate", aug.rotate},
                {"aug_translation", aug.max_translation},
                {"aug_noise", aug.noise_sigma},
                {"checkpoint_every", checkpoint_every},
                {"data_dir", data_dir},
                {"model", model.to_json()}};
}

StepGraph build_training_graph(const TrainConfig& cfg, const data::NormalizedSequence& ns,
                               std::mt19937_64& rng) {
    StepGraph sg;
    sg.graph = std::make_unique<Graph>();
    Graph& g = *sg.graph;
    sg.bound = model::declare_params(g, cfg.model);
    model::FrameInputs f0 = model::prepare_frame(ns.clouds[0].points, cfg.model, rng);
    model::FrameInputs f1 = model::prepare_frame(ns.clouds[1].points, cfg.model, rng);
    data::QueryBatch q_t = data::sample_queries(ns.clouds[1].points, cfg.n_pos, cfg.n_neg, rng);
    data::QueryBatch q_s = data::sample_queries(ns.clouds[0].points, cfg.n_pos, cfg.n_neg, rng);
    Value queries_t = g.constant(q_t.points);
    Value queries_s = g.constant(q_s.points);
    model::TransporterForward fwd = model::forward_transporter(
        g, sg.bound, f0, f1, queries_t, queries_s, cfg.model, cfg.stopgrad_keypoints);
    sg.occ_t = losses::occupancy_loss(fwd.prob_t, g.constant(q_t.labels));
    sg.occ_s = losses::occupancy_loss(fwd.prob_s, g.constant(q_s.labels));
    if (cfg.articulation_prior) {
        auto corr01 = losses::correspondence_loss(fwd.k_s, fwd.k_t, cfg.stopgrad_fit);
        if (ns.clouds.size() >= 3) {
            model::FrameInputs f1b = model::prepare_frame(ns.clouds[1].points, cfg.model, rng);
            model::FrameInputs f2 = model::prepare_frame(ns.clouds[2].points, cfg.model, rng);
            auto [sal_1, sal_2] = model::detect_saliencies(g, sg.bound, f1b, f2, cfg.model);
            Value k1 = geom::marginalize_keypoints(sal_1);
            Value k2 = geom::marginalize_keypoints(sal_2);
            auto corr12 = losses::correspondence_loss(k1, k2, cfg.stopgrad_fit);
            sg.corr = mul(g.constant_scalar(0.5), add(corr01.loss, corr12.loss));
            sg.axis = losses::axis_consistency_loss(geom::unit_rotation_axis(corr01.rotation),
                                                    geom::unit_rotation_axis(corr12.rotation));
        } else {
            sg.corr = corr01.loss;
        }
    }
    sg.total = losses::total_loss(sg.occ_t, sg.occ_s, sg.corr, sg.axis, cfg.weights);
    return sg;
}

namespace {

std::string format_row(const StepLog& l) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%" PRId64 ",%.17g,%.17g,%.17g,%.17g,%.17g", l.step, l.occ_t,
                  l.occ_s, l.corr, l.axis, l.total);
    return buf;
}

uint64_t fnv1a(const unsigned char* p, size_t n) {
    uint64_t h = 1469598103934665603ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
    return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::string& out_dir) {
    cfg.model.validate();
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw TrainError("bad epoch/batch configuration");
    if (cfg.lr <= 0.0) throw TrainError("learning rate must be positive");

    std::vector<data::Sequence> sequences;
    for (const std::string& dir : data::list_sequence_dirs(cfg.data_dir))
        sequences.push_back(data::read_sequence(dir));
    std::vector<std::string> names = data::list_sequence_dirs(cfg.data_dir);

    TrainResult result;
    result.params = model::init_params(cfg.model, cfg.seed);
    std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995u);
    OptimState opt;
    opt.lr = cfg.lr;

    std::FILE* csv = nullptr;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        csv = std::fopen((fs::path(out_dir) / "curve.csv").string().c_str(), "w");
        if (!csv) throw TrainError("cannot write loss curve in '" + out_dir + "'");
        std::fprintf(csv, "%s\n", kCurveHeader);
    }
    auto save_latest = [&]() {
        if (!out_dir.empty())
            save_checkpoint((fs::path(out_dir) / "checkpoint_latest.tkd").string(), cfg.model,
                            result.params);
    };

    const int64_t steps_per_epoch =
        (static_cast<int64_t>(sequences.size()) + cfg.batch_size - 1) / cfg.batch_size;
    int64_t step = 0;
    bool done = false;
    for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
        opt.lr = cfg.lr / (epoch >= cfg.lr_drop_epoch ? cfg.lr_drop_factor : 1.0);
        std::vector<size_t> order(sequences.size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (int64_t b = 0; b < steps_per_epoch && !done; ++b) {
            std::map<std::string, Tensor> grad_sum;
            StepLog log;
            int in_batch = 0;
            for (int k = 0; k < cfg.batch_size; ++k) {
                const size_t idx = order[static_cast<size_t>(
                    (b * cfg.batch_size + k) % static_cast<int64_t>(order.size()))];
                data::Sequence seq = sequences[idx];
                if (cfg.augment) data::augment_sequence(seq, rng, cfg.aug);
                data::NormalizedSequence ns = data::normalize(seq);
                StepGraph sg = build_training_graph(cfg, ns, rng);
                Bindings bind;
                for (const auto& [name, t] : result.params) bind[name] = t;
                Graph::Run run = sg.graph->run(bind);
                const double occ_t = run.values[static_cast<size_t>(sg.occ_t.id)].data[0];
                const double occ_s = run.values[static_cast<size_t>(sg.occ_s.id)].data[0];
                const double corr =
                    sg.corr ? run.values[static_cast<size_t>(sg.corr->id)].data[0] : 0.0;
                const double axis =
                    sg.axis ? run.values[static_cast<size_t>(sg.axis->id)].data[0] : 0.0;
                const double total = run.values[static_cast<size_t>(sg.total.id)].data[0];
                if (!std::isfinite(total))
                    throw TrainError("step " + std::to_string(step) + " (sequence " +
                                     names[idx] + "): non-finite loss");
                std::vector<std::string> wrt;
                for (const auto& [name, t] : result.params) wrt.push_back(name);
                auto grads = sg.graph->gradient_from(run, sg.total, wrt);
                for (auto& [name, t] : grads) {
                    auto it = grad_sum.find(name);
                    if (it == grad_sum.end())
                        grad_sum.emplace(name, std::move(t));
                    else
                        for (int64_t i = 0; i < t.numel(); ++i) it->second.data[i] += t.data[i];
                }
                log.occ_t += occ_t;
                log.occ_s += occ_s;
                log.corr += corr;
                log.axis += axis;
                log.total += total;
                ++in_batch;
            }
            for (auto& [name, t] : grad_sum)
                for (auto& v : t.data) v /= static_cast<double>(in_batch);
            log.step = step;
            log.occ_t /= in_batch;
            log.occ_s /= in_batch;
            log.corr /= in_batch;
            log.axis /= in_batch;
            log.total /= in_batch;
            std::string diag;
            if (!adam_step(result.params, grad_sum, opt, &diag))
                throw TrainError("step " + std::to_string(step) + ": " + diag);
            result.curve.push_back(log);
            if (csv) {
                std::fprintf(csv, "%s\n", format_row(log).c_str());
                std::fflush(csv);
            }
            ++step;
            if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) save_latest();
            if (cfg.max_steps > 0 && step >= cfg.max_steps) done = true;
        }
    }
    result.steps = step;
    if (csv) std::fclose(csv);
    if (!out_dir.empty()) {
        save_latest();
        save_checkpoint((fs::path(out_dir) / "checkpoint.tkd").string(), cfg.model,
                        result.params);
    }
    return result;
}

// ---- checkpoints -------------------------------------------------------------

namespace {
constexpr char kMagic[8] = {'T', 'K', 'D', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const model::Params& params) {
    std::vector<unsigned char> payload;
    json manifest = json::array();
    for (const auto& [name, t] : params) {
        const size_t offset = payload.size();
        payload.resize(offset + sizeof(float) * static_cast<size_t>(t.numel()));
        auto* dst = reinterpret_cast<float*>(payload.data() + offset);
        for (int64_t i = 0; i < t.numel(); ++i) dst[i] = static_cast<float>(t.data[i]);
        manifest.push_back({{"name", name},
                            {"dtype", "f32"},
                            {"shape", t.shape},
                            {"offset", offset},
                            {"checksum", hex64(fnv1a(payload.data() + offset,
                                                     sizeof(float) * static_cast<size_t>(t.numel())))}});
    }
    json header{{"model", cfg.to_json()},
                {"tensors", manifest},
                {"payload_bytes", payload.size()}};
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw TrainError("cannot write checkpoint '" + path + "'");
    out.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw TrainError("short write for checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TrainError("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw TrainError("'" + path + "' is not a checkpoint (bad magic)");
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (1ull << 30))
        throw TrainError("'" + path + "': implausible header length");
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw TrainError("'" + path + "': truncated header");
    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw TrainError("'" + path + "': malformed header: " + e.what());
    }
    std::vector<unsigned char> payload(header.at("payload_bytes").get<size_t>());
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
    if (static_cast<size_t>(in.gcount()) != payload.size())
        throw TrainError("'" + path + "': truncated payload");

    Checkpoint ck;
    ck.config = model::ModelConfig::from_json(header.at("model"));
    std::vector<std::pair<size_t, size_t>> spans;
    for (const json& jt : header.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        Shape shape = jt.at("shape").get<Shape>();
        const size_t offset = jt.at("offset").get<size_t>();
        const size_t bytes = sizeof(float) * static_cast<size_t>(numel_of(shape));
        if (offset + bytes > payload.size())
            throw TrainError("'" + path + "': tensor '" + name + "' overruns the payload");
        spans.emplace_back(offset, offset + bytes);
        if (jt.at("dtype").get<std::string>() != "f32")
            throw TrainError("'" + path + "': unsupported dtype for '" + name + "'");
        const std::string want = jt.at("checksum").get<std::string>();
        if (hex64(fnv1a(payload.data() + offset, bytes)) != want)
            throw TrainError("'" + path + "': checksum mismatch for '" + name + "'");
        Tensor t(shape);
        const auto* src = reinterpret_cast<const float*>(payload.data() + offset);
        for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = static_cast<double>(src[i]);
        ck.params.emplace(name, std::move(t));
    }
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); ++i)
        if (spans[i].first < spans[i - 1].second)
            throw TrainError("'" + path + "': overlapping tensor spans in the manifest");
    return ck;
}

// ---- metrics ------------------------------------------------------------------

double ackd(const geom::KeypointSet& k_a, const geom::KeypointSet& k_b,
            const geom::RigidTransform& gt_motion) {
    if (k_a.size() != k_b.size() || k_a.empty())
        throw TrainError("ackd: keypoint sets must match and be nonempty");
    double sum = 0.0;
    for (size_t i = 0; i < k_a.size(); ++i) sum += (gt_motion.apply(k_a[i]) - k_b[i]).norm();
    return sum / static_cast<double>(k_a.size());
}

double rr(const geom::KeypointSet& k_a, const geom::KeypointSet& k_b,
          const geom::RigidTransform& gt_motion, double tau) {
    if (tau <= 0.0) throw TrainError("rr: tau must be positive");
    if (k_a.size() != k_b.size() || k_a.empty())
        throw TrainError("rr: keypoint sets must match and be nonempty");
    int hits = 0;
    for (size_t i = 0; i < k_a.size(); ++i)
        if ((gt_motion.apply(k_a[i]) - k_b[i]).norm() < tau) ++hits;
    return static_cast<double>(hits) / static_cast<double>(k_a.size());
}

double add_metric(const geom::RigidTransform& pred, const geom::RigidTransform& gt,
                  const std::vector<geom::Vec3>& part_points) {
    if (part_points.empty()) throw TrainError("add: no part points");
    double sum = 0.0;
    for (const auto& x : part_points) sum += (pred.apply(x) - gt.apply(x)).norm();
    return sum / static_cast<double>(part_points.size());
}

std::pair<geom::KeypointSet, geom::KeypointSet> detect_keypoints(
    const model::ModelConfig& cfg, const model::Params& params,
    const std::vector<geom::Vec3>& cloud_a, const std::vector<geom::Vec3>& cloud_b,
    uint64_t seed) {
    std::mt19937_64 rng(seed);
    model::FrameInputs fa = model::prepare_frame(cloud_a, cfg, rng);
    model::FrameInputs fb = model::prepare_frame(cloud_b, cfg, rng);
    Graph g;
    model::BoundParams p = model::declare_params(g, cfg);
    auto [sal_a, sal_b] = model::detect_saliencies(g, p, fa, fb, cfg);
    Value ka = geom::marginalize_keypoints(sal_a);
    Value kb = geom::marginalize_keypoints(sal_b);
    Bindings bind;
    for (const auto& [name, t] : params) bind[name] = t;
    Graph::Run run = g.run(bind);
    auto to_set = [&](Value v) {
        const Tensor& t = run.values[static_cast<size_t>(v.id)];
        geom::KeypointSet out;
        for (int64_t i = 0; i < t.shape[0]; ++i)
            out.emplace_back(t.at(i, 0), t.at(i, 1), t.at(i, 2));
        return out;
    };
    return {to_set(ka), to_set(kb)};
}

json PerceptionReport::to_json(const json& config_echo) const {
    json pairs = json::array();
    for (const PairReport& p : per_pair)
        pairs.push_back({{"sequence", p.sequence},
                         {"frame_a", p.frame_a},
                         {"frame_b", p.frame_b},
                         {"ackd", p.ackd},
                         {"rr", p.rr},
                         {"add", p.add}});
    return json{{"per_pair", pairs},
                {"aggregate", {{"ackd", ackd}, {"rr", rr}, {"add", add}}},
                {"rr_tau", rr_tau},
                {"config_echo", config_echo}};
}

PerceptionReport evaluate(const model::ModelConfig& cfg, const model::Params& params,
                          const std::string& data_dir, const EvalOptions& opt) {
    PerceptionReport report;
    report.rr_tau = opt.rr_tau;
    if (!opt.dump_dir.empty()) fs::create_directories(opt.dump_dir);
    std::vector<std::string> dirs = data::list_sequence_dirs(data_dir);
    for (const std::string& dir : dirs) {
        data::Sequence seq = data::read_sequence(dir);
        data::NormalizedSequence ns = data::normalize(seq);
        const std::string name = fs::path(dir).filename().string();
        for (size_t f = 0; f + 1 < ns.clouds.size(); ++f) {
            auto [k_a, k_b] = detect_keypoints(cfg, params, ns.clouds[f].points,
                                               ns.clouds[f + 1].points,
                                               opt.seed ^ (std::hash<std::string>{}(name) + f));
            // GT motion frame f -> f+1 in normalized coordinates
            const geom::RigidTransform gt =
                ns.poses[f + 1].compose(ns.poses[f].inverse());
            PairReport pr;
            pr.sequence = name;
            pr.frame_a = static_cast<int>(f);
            pr.frame_b = static_cast<int>(f + 1);
            pr.ackd = ackd(k_a, k_b, gt);
            pr.rr = rr(k_a, k_b, gt, opt.rr_tau);
            std::vector<geom::Vec3> part_points;
            for (size_t i = 0; i < ns.clouds[f].size(); ++i)
                if (ns.clouds[f].part_mask[i]) part_points.push_back(ns.clouds[f].points[i]);
            const geom::RigidFit fit = geom::fit_rigid(k_a, k_b);
            pr.add = add_metric(fit.transform, gt, part_points);
            report.per_pair.push_back(pr);
            if (!opt.dump_dir.empty()) {
                data::Cloud ca, cb;
                ca.points = k_a;
                cb.points = k_b;
                const std::string stem =
                    (fs::path(opt.dump_dir) / (name + "_pair" + std::to_string(f))).string();
                data::write_cloud_ply(stem + "_a.ply", ca);
                data::write_cloud_ply(stem + "_b.ply", cb);
            }
        }
    }
    if (report.per_pair.empty()) throw TrainError("no pairs evaluated under '" + data_dir + "'");
    for (const PairReport& p : report.per_pair) {
        report.ackd += p.ackd;
        report.rr += p.rr;
        report.add += p.add;
    }
    const double n = static_cast<double>(report.per_pair.size());
    report.ackd /= n;
    report.rr /= n;
    report.add /= n;
    return report;
}

}  // namespace tkd::train
