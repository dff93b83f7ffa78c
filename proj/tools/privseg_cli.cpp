// privseg - umbrella CLI: dataset generation, training, encoding, the
// segmentation server/client, audits and MI checks.
#include <CLI11.hpp>

#include <privseg/client.hpp>
#include <privseg/experiment.hpp>
#include <privseg/server.hpp>
#include <privseg/volume_io.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace privseg;

namespace {

struct EndpointParts {
  std::string host = "127.0.0.1";
  int port = 7700;
};

EndpointParts parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos)
    throw std::invalid_argument("endpoint must be host:port, got " + s);
  EndpointParts e;
  e.host = s.substr(0, colon);
  e.port = std::stoi(s.substr(colon + 1));
  return e;
}

void save_encoding(const std::string& path, const Tensor<float>& enc) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(enc.data()),
          std::streamsize(size_t(enc.size()) * sizeof(float)));
  nlohmann::json side{{"shape", enc.shape()}, {"dtype", "float32"}};
  std::ofstream sf(path + ".json");
  sf << side.dump(2) << "\n";
}

// train-state checkpoints carry optimizer state; bare system checkpoints
// (network.json + groups) are accepted too
TrainState<float> load_any_checkpoint(const std::string& dir) {
  if (fs::exists(dir + "/state.json")) return load_train_state<float>(dir);
  if (!fs::exists(dir + "/network.json"))
    throw std::runtime_error("no checkpoint at " + dir + " (missing network.json)");
  std::ifstream nf(dir + "/network.json");
  const auto nc = network_config_from_json(nlohmann::json::parse(nf));
  TrainState<float> st(TrainConfig{}, nc);
  for (const char* g : {"G", "S", "D"}) load_param_group<float>(dir, g, st.sys.group(g));
  return st;
}

int cmd_phantom(int subjects, int sessions, int64_t extent, int classes, uint64_t seed,
                double train_frac, double val_frac, double test_frac,
                const std::string& out) {
  PhantomConfig pc;
  pc.shape = {extent, extent, extent};
  pc.num_classes = classes;
  fs::create_directories(out);
  std::vector<SubjectRecord> records;
  for (int s = 0; s < subjects; ++s)
    for (int t = 0; t < sessions; ++t) {
      const auto [vol, lab] = generate_phantom(seed + uint64_t(s), uint64_t(t), pc);
      SubjectRecord r;
      r.subject_id = "s" + std::to_string(s);
      r.session_id = "t" + std::to_string(t);
      r.volume_path = r.subject_id + "_" + r.session_id + ".vol";
      r.labels_path = r.subject_id + "_" + r.session_id + ".lab";
      save_volume((fs::path(out) / r.volume_path).string(), vol);
      save_labels((fs::path(out) / r.labels_path).string(), lab);
      records.push_back(std::move(r));
    }
  const auto manifest =
      split_stratified(records, {train_frac, val_frac, test_frac}, seed);
  save_manifest((fs::path(out) / "manifest.json").string(), manifest);
  std::cout << "wrote " << records.size() << " volumes and manifest.json to " << out
            << "\n";
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& out,
              const std::string& config_path, double lambda, int epochs, uint64_t seed,
              bool deterministic, bool skip_pretrain, bool unaligned, int enc_channels) {
  TrainConfig tc;
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw std::runtime_error("cannot open config: " + config_path);
    tc = TrainConfig::from_json(nlohmann::json::parse(f));
  }
  if (lambda >= 0.0) tc.lambda = lambda;
  if (epochs >= 0) tc.epochs = epochs;
  tc.seed = seed;
  tc.deterministic = deterministic;
  tc.aligned_crops = !unaligned;
  tc.validate();

  NetworkConfig nc;
  nc.enc_channels = enc_channels;
  const auto data = Dataset<float>::load(data_path);
  nc.num_classes = data.num_classes;

  TrainState<float> st(tc, nc);
  if (!skip_pretrain) {
    std::cout << "pretraining encoder (" << tc.pretrain_encoder_epochs << " epochs)\n";
    pretrain_encoder(st, data, tc.pretrain_encoder_epochs);
    std::cout << "pretraining task networks (" << tc.pretrain_task_epochs << " epochs)\n";
    pretrain_task_networks(st, data, tc.pretrain_task_epochs);
  }
  std::cout << "adversarial training: lambda=" << tc.lambda << " epochs=" << tc.epochs
            << "\n";
  train_adversarial(st, data, out);
  save_train_state(out, st);
  for (const auto& m : st.history)
    if (m.phase == "adversarial")
      std::cout << "epoch " << m.epoch << " seg=" << m.mean_seg_loss
                << " disc=" << m.mean_disc_loss << " d_acc=" << m.disc_train_accuracy
                << "\n";
  std::cout << "state written to " << out << "\n";
  return 0;
}

int cmd_encode(const std::string& ckpt, const std::string& input,
               const std::string& output) {
  auto st = load_any_checkpoint(ckpt);
  const Volume vol = load_volume(input);
  const auto enc = forward_encoder(st.sys.G, vol.voxels);
  save_encoding(output, enc);
  std::cout << "encoded " << input << " -> " << output << " " << shape_str(enc.shape())
            << "\n";
  return 0;
}

int cmd_serve(const std::string& bind, const std::string& ckpt, int concurrency,
              const std::string& version) {
  auto st = load_any_checkpoint(ckpt);
  const auto ep = parse_endpoint(bind);
  ServerConfig sc{ep.host, ep.port, concurrency, version};
  SegServer<float> server(st.sys.S, sc);
  server.start();
  std::cout << "serving segmentation on " << ep.host << ":" << server.port() << "\n"
            << std::flush;
  server.wait();
  return 0;
}

int cmd_segment(const std::string& ckpt, const std::string& input,
                const std::string& output, const std::string& server_ep, bool local,
                uint64_t seed, int64_t window, int64_t step, int timeout_ms, int retries,
                const std::string& version) {
  auto st = load_any_checkpoint(ckpt);
  const Volume vol = load_volume(input);
  SegmentOutcome<float> out;
  if (local) {
    out = local_segment(st.sys.G, st.sys.S, vol, {window, window, window},
                        {step, step, step});
  } else {
    std::string ep = server_ep;
    if (ep.empty()) {
      const char* env = std::getenv("PRIVSEG_SERVER");
      if (!env)
        throw std::runtime_error(
            "no server endpoint: pass --server or set PRIVSEG_SERVER, or use --local");
      ep = env;
    }
    const auto parts = parse_endpoint(ep);
    ClientConfig cc;
    cc.host = parts.host;
    cc.port = parts.port;
    cc.window = {window, window, window};
    cc.steps = {step, step, step};
    cc.shuffle_seed = seed;
    cc.timeout_ms = timeout_ms;
    cc.max_retries = retries;
    cc.model_version = version;
    out = client_segment(st.sys.G, vol, cc);
  }
  LabelMap lm;
  lm.labels = out.labels;
  lm.num_classes = st.sys.cfg.num_classes;
  save_labels(output, lm);
  save_encoding(output + ".probs", out.softmax);
  std::cout << "segmented " << input << " -> " << output << "\n";
  return 0;
}

int cmd_eval(const std::string& data_path, const std::string& ckpt,
             const std::string& out, double lambda_label) {
  auto data = Dataset<float>::load(data_path);
  auto st = load_any_checkpoint(ckpt);
  DeskConfig cfg;
  cfg.num_classes = data.num_classes;
  cfg.extent = data.volumes.front().dim(0);
  cfg.net = st.sys.cfg;
  const auto tmp = fs::temp_directory_path() / "privseg_eval_cache";
  DeskExperiment exp(cfg, std::move(data), tmp.string());
  const auto report = exp.build_audit(st, lambda_label, st.cfg.seed);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot open for write: " + out);
    f << report.to_json().dump(2) << "\n";
  }
  std::cout << report.to_table();
  return 0;
}

int cmd_mi_audit(const std::string& joint_path, int sweep, const std::string& ckpt,
                 const std::string& data_path, size_t n_pairs, uint64_t seed) {
  if (!joint_path.empty()) {
    std::ifstream f(joint_path);
    if (!f) throw std::runtime_error("cannot open joint table: " + joint_path);
    const auto joint = DiscreteJoint::from_json(nlohmann::json::parse(f));
    const double mi = brute_force_mi(joint);
    const auto tight = variational_bound(exact_posterior(joint), joint);
    std::cout << "brute-force MI: " << mi << " nats\n";
    std::cout << "bound at exact posterior: " << tight.value << " nats\n";
    Rng rng(seed);
    int violations = 0;
    for (int i = 0; i < sweep; ++i) {
      ConditionalModel q;
      q.q = Tensor<double>(joint.p.shape());
      for (int64_t e = 0; e < q.q.dim(0); ++e)
        for (int64_t g = 0; g < q.q.dim(1); ++g) {
          const double a = rng.uniform(1e-4, 1.0 - 1e-4);
          q.q.at(e, g, 0) = a;
          q.q.at(e, g, 1) = 1.0 - a;
        }
      if (variational_bound(q, joint).value > mi + 1e-12) ++violations;
    }
    std::cout << "lower-bound property: " << (sweep - violations) << "/" << sweep
              << " random Q below MI\n";
    return violations == 0 ? 0 : 1;
  }
  if (ckpt.empty() || data_path.empty())
    throw std::runtime_error(
        "mi-audit needs either --joint or both --checkpoint and --data");
  auto data = Dataset<float>::load(data_path);
  auto st = load_any_checkpoint(ckpt);
  const auto pair_samples = sample_pairs(data.manifest, Split::kTest, n_pairs, seed);
  std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
  std::vector<bool> labels;
  for (const auto& pr : pair_samples) {
    pairs.emplace_back(data.volumes[pr.i], data.volumes[pr.j]);
    labels.push_back(pr.same_subject);
  }
  const auto est = audit_model(st.sys.G, st.sys.D, pairs, labels);
  std::cout << "identity-information lower bound: " << est.value << " nats +- "
            << est.std_err << " (n=" << est.samples << ")\n";
  if (est.empirical_prior) std::cout << "note: unbalanced pairs, empirical H(s) used\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"privseg: identity-obfuscating volumetric segmentation"};
  app.require_subcommand(1);

  auto* ph = app.add_subcommand("phantom", "generate a synthetic dataset + manifest");
  int subjects = 4, sessions = 2, classes = 4;
  int64_t extent = 32;
  uint64_t seed = 1;
  double tf = 0.7, vf = 0.0, ef = 0.3;
  std::string out_dir;
  ph->add_option("--subjects", subjects);
  ph->add_option("--sessions", sessions);
  ph->add_option("--shape", extent, "cubic extent");
  ph->add_option("--classes", classes);
  ph->add_option("--seed", seed);
  ph->add_option("--train-frac", tf);
  ph->add_option("--val-frac", vf);
  ph->add_option("--test-frac", ef);
  ph->add_option("--out", out_dir)->required();

  auto* tr = app.add_subcommand("train", "pretrain + adversarial training");
  std::string data_path, state_out, config_path;
  double lambda = -1.0;
  int epochs = -1;
  uint64_t tseed = 1;
  bool deterministic = true, skip_pretrain = false, unaligned = false;
  int enc_channels = 1;
  tr->add_option("--data", data_path, "manifest.json")->required();
  tr->add_option("--out", state_out)->required();
  tr->add_option("--config", config_path, "TrainConfig JSON");
  tr->add_option("--lambda", lambda);
  tr->add_option("--epochs", epochs);
  tr->add_option("--seed", tseed);
  tr->add_flag("--deterministic,!--no-deterministic", deterministic);
  tr->add_flag("--skip-pretrain", skip_pretrain);
  tr->add_flag("--unaligned-crops", unaligned);
  tr->add_option("--enc-channels", enc_channels, "encoding channels (1-3)");

  auto* en = app.add_subcommand("encode", "volume -> encoding file");
  std::string ckpt, input, output;
  en->add_option("--checkpoint", ckpt)->required();
  en->add_option("--input", input)->required();
  en->add_option("--output", output)->required();

  auto* sv = app.add_subcommand("serve", "run the segmentation server");
  std::string bind = "127.0.0.1:7700", version = "v1";
  int concurrency = 4;
  sv->add_option("--bind", bind, "host:port");
  sv->add_option("--checkpoint", ckpt)->required();
  sv->add_option("--concurrency", concurrency);
  sv->add_option("--model-version", version);

  auto* sg = app.add_subcommand("segment", "segment a volume locally or via a server");
  std::string server_ep;
  bool local = false;
  uint64_t sseed = 1;
  int64_t window = 16, step = 16;
  int timeout_ms = 5000, retries = 3;
  sg->add_option("--checkpoint", ckpt)->required();
  sg->add_option("--input", input)->required();
  sg->add_option("--output", output)->required();
  sg->add_option("--server", server_ep, "host:port (or env PRIVSEG_SERVER)");
  sg->add_flag("--local", local);
  sg->add_option("--seed", sseed, "patch shuffle seed");
  sg->add_option("--window", window);
  sg->add_option("--step", step);
  sg->add_option("--timeout-ms", timeout_ms);
  sg->add_option("--retries", retries);
  sg->add_option("--model-version", version);

  auto* ev = app.add_subcommand("eval", "emit the audit report");
  std::string report_out;
  double lambda_label = 0.0;
  ev->add_option("--data", data_path)->required();
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--out", report_out, "report JSON path");
  ev->add_option("--lambda", lambda_label, "label recorded in the report");

  auto* mi = app.add_subcommand("mi-audit", "mutual-information oracle checks");
  std::string joint_path;
  int sweep = 200;
  size_t n_pairs = 200;
  mi->add_option("--joint", joint_path, "DiscreteJoint JSON table");
  mi->add_option("--sweep", sweep, "random Q count for the bound property");
  mi->add_option("--checkpoint", ckpt);
  mi->add_option("--data", data_path);
  mi->add_option("--pairs", n_pairs);
  mi->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(ph))
      return cmd_phantom(subjects, sessions, extent, classes, seed, tf, vf, ef, out_dir);
    if (app.got_subcommand(tr))
      return cmd_train(data_path, state_out, config_path, lambda, epochs, tseed,
                       deterministic, skip_pretrain, unaligned, enc_channels);
    if (app.got_subcommand(en)) return cmd_encode(ckpt, input, output);
    if (app.got_subcommand(sv)) return cmd_serve(bind, ckpt, concurrency, version);
    if (app.got_subcommand(sg))
      return cmd_segment(ckpt, input, output, server_ep, local, sseed, window, step,
                         timeout_ms, retries, version);
    if (app.got_subcommand(ev)) return cmd_eval(data_path, ckpt, report_out, lambda_label);
    if (app.got_subcommand(mi))
      return cmd_mi_audit(joint_path, sweep, ckpt, data_path, n_pairs, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
