// sagsin: command-line driver for dataset generation, training and the two
// evaluation curves. Exit status is 0 on success, otherwise the ErrorKind code.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "sagsin/io.hpp"
#include "sagsin/metrics.hpp"
#include "sagsin/pipeline.hpp"

using namespace sagsin;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config, out, profile = "desk";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "Experiment config (key = value sections)")->check(CLI::ExistingFile);
  auto* o = cmd->add_option("--out", c.out, "Output path");
  if (out_required) o->required();
  cmd->add_option("--seed", c.seed, "Global seed, overrides the config");
  cmd->add_option("--profile", c.profile, "Channel profile")->check(CLI::IsMember({"desk", "paper"}));
}

io::ExperimentConfig load(const Common& c) {
  auto cfg = io::parse_config(c.config.empty() ? std::string() : io::read_text(c.config), c.profile);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void note(const char* fmt_str, auto... args) {
  std::fprintf(stderr, fmt_str, args...);
  std::fputc('\n', stderr);
}

void check_frame_shape(const std::vector<ddchan::ChannelFrame>& frames, const ddchan::DdConfig& dd) {
  require(!frames.empty(), ErrorKind::InvalidInput, "dataset holds no frames");
  const auto& f = frames.front();
  require(f.n_port == dd.n_port && f.n_tx == dd.n_tx && f.n_delay == dd.n_delay && f.n_doppler == dd.n_doppler,
          ErrorKind::DimensionMismatch, "dataset frame shape does not match the [ddchan] config");
}

io::Container with_config(const io::ExperimentConfig& cfg) {
  io::Container c;
  c.put("config", io::text_array(io::canonical_text(cfg)));
  return c;
}

// Curve name, container key (section names are limited to 16 bytes), kind.
struct ModelSlot {
  std::string name, key;
  predict::Kind kind;
};
const std::vector<ModelSlot> kModels{
    {"lora", "lora", predict::Kind::LoraTransformer},
    {"linear_ar", "ar", predict::Kind::LinearAr},
    {"persistence", "pers", predict::Kind::Persistence},
};

// --- verbs -----------------------------------------------------------------

void cmd_gen(const Common& opt) {
  const auto cfg = load(opt);
  const auto dd = cfg.channel();
  Rng rng = make_rng(cfg.seed, 0x6464);
  note("gen: %zu frames of [%zu, %zu, %zu, %zu]", dd.frame_count, dd.n_port, dd.n_tx, dd.n_delay, dd.n_doppler);
  const auto frames = ddchan::evolve_sequence(dd, rng);
  auto c = with_config(cfg);
  io::put_frames(c, frames);
  c.save(opt.out);
}

void cmd_calibrate(const Common& opt, const std::string& data) {
  const auto cfg = load(opt);
  const auto frames = io::get_frames(io::Container::load(data));
  check_frame_shape(frames, cfg.dd);
  const auto lay = cfg.layout();
  const auto cal = pipeline::calibrate(frames, lay, cfg.spatial_rank, cfg.dd_rank);
  note("calibrate: reference port %zu, energy retained %.4f", cal.ref_port, cal.energy_captured);
  std::vector<tokenize::TokenStream> train, test;
  for (std::size_t s : pipeline::train_starts(lay)) train.push_back(pipeline::window_tokens(frames, s, lay, cal));
  for (std::size_t s : pipeline::test_starts(lay)) test.push_back(pipeline::window_tokens(frames, s, lay, cal));
  auto c = with_config(cfg);
  io::put_calibration(c, cal);
  io::put_tokens(c, "tok.train", train);
  io::put_tokens(c, "tok.test", test);
  c.save(opt.out);
}

std::vector<predict::Window> windows(const io::Container& cal_file, const std::string& name,
                                     const io::ExperimentConfig& cfg) {
  const auto cal = io::get_calibration(cal_file);
  std::vector<predict::Window> out;
  for (const auto& ts : io::get_tokens(cal_file, name))
    out.push_back(pipeline::window_from_tokens(ts, cfg.dd.lookback, cal.coeff_len()));
  return out;
}

void cmd_train(const Common& opt, const std::string& cal_path, const std::string& loss_csv) {
  const auto cfg = load(opt);
  const auto cal_file = io::Container::load(cal_path);
  const auto train = windows(cal_file, "tok.train", cfg);
  auto c = with_config(cfg);
  std::vector<double> lora_loss;
  for (const auto& [name, key, kind] : kModels) {
    const auto spec = cfg.predictor(kind);
    const auto m = predict::fit(spec, train, [&](std::size_t e, double l) {
      if (e % 10 == 0 || e + 1 == spec.epochs) note("train %s: epoch %zu loss %.5f", name.c_str(), e, l);
    });
    if (kind == predict::Kind::LoraTransformer) {
      note("train %s: kept epoch %zu", name.c_str(), m.best_epoch);
      lora_loss = m.loss_log;
    }
    io::put_model(c, key, m);
  }
  c.save(opt.out);
  if (!loss_csv.empty()) {
    io::Csv t{{"epoch", "lora_train_loss"}, {}};
    for (std::size_t e = 0; e < lora_loss.size(); ++e) t.rows.push_back({static_cast<double>(e), lora_loss[e]});
    io::write_csv(loss_csv, t, "train", cfg);
  }
}

void cmd_eval_capacity(const Common& opt, const std::string& data, const std::string& cal_path,
                       const std::string& model_path, const std::string& nmse_csv) {
  const auto cfg = load(opt);
  const auto frames = io::get_frames(io::Container::load(data));
  check_frame_shape(frames, cfg.dd);
  const auto lay = cfg.layout();
  pipeline::check_frames(frames, lay);
  const auto cal_file = io::Container::load(cal_path);
  const auto cal = io::get_calibration(cal_file);
  const auto coded = windows(cal_file, "tok.test", cfg);
  const auto starts = pipeline::test_starts(lay);
  require(coded.size() == starts.size(), ErrorKind::DimensionMismatch,
          "calibration file test windows do not match the [eval] layout");
  std::vector<metrics::CapacityWindow> test;
  for (std::size_t i = 0; i < starts.size(); ++i) test.push_back(pipeline::capacity_window(coded[i], frames, starts[i], lay));

  const auto model_file = io::Container::load(model_path);
  std::vector<predict::ModelState> models;
  for (const auto& [name, key, kind] : kModels) {
    models.push_back(io::get_model(model_file, key));
    require(models.back().coeff_len == cal.coeff_len(), ErrorKind::DimensionMismatch,
            "model '" + name + "' was trained for a different calibration");
  }
  std::vector<metrics::NamedPredictor> named;
  for (std::size_t i = 0; i < models.size(); ++i) named.push_back({kModels[i].name, &models[i]});

  const auto grid = io::snr_grid(cfg.eval.snr_min, cfg.eval.snr_max, cfg.eval.snr_step);
  const auto rep = metrics::ergodic_capacity_curve(test, named, cal, cfg.channel(), grid);
  io::Csv t{{"snr_db", "perfect", "oracle_compressed", "lora", "linear_ar", "persistence"}, {}};
  for (std::size_t s = 0; s < grid.size(); ++s)
    t.rows.push_back({grid[s], rep.perfect.mean[s], rep.curve("oracle_compressed").mean[s], rep.curve("lora").mean[s],
                      rep.curve("linear_ar").mean[s], rep.curve("persistence").mean[s]});
  io::write_csv(opt.out, t, "eval-capacity", cfg);

  if (!nmse_csv.empty()) {
    io::Csv n{{"step", "lora", "linear_ar", "persistence"}, {}};
    std::vector<predict::NmseReport> reps;
    for (const auto& m : models) reps.push_back(pipeline::evaluate_nmse(m, coded));
    for (std::size_t h = 0; h < lay.horizon; ++h)
      n.rows.push_back({static_cast<double>(h + 1), reps[0].per_step[h], reps[1].per_step[h], reps[2].per_step[h]});
    io::write_csv(nmse_csv, n, "eval-capacity", cfg);
  }
}

void cmd_gen_uwa_probe(const Common& opt) {
  const auto cfg = load(opt);
  const auto uwa = cfg.underwater();
  Rng rng = make_rng(cfg.seed, 0x757761);
  const auto ts = uwachan::build_tap_set(uwa, rng);
  note("gen-uwa-probe: %zu taps, LoS delay %.4f s, max Doppler %.2f Hz", ts.taps.size(), ts.los_delay, ts.max_doppler);
  io::Csv t{{"tap", "delay_s", "power", "doppler_hz", "gain_re", "gain_im", "is_los"}, {}};
  for (std::size_t p = 0; p < ts.taps.size(); ++p) {
    const auto& k = ts.taps[p];
    t.rows.push_back({static_cast<double>(p), k.delay, k.power, k.doppler, k.gain.real(), k.gain.imag(), k.is_los ? 1.0 : 0.0});
  }
  io::write_csv(opt.out, t, "gen-uwa-probe", cfg);
}

void cmd_make_corpus(const Common& opt) {
  const auto cfg = load(opt);
  const auto corpus = semlink::make_corpus(cfg.sem.corpus_size, cfg.seed);
  fs::create_directories(opt.out);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%04zu.sgim", i);
    io::write_sgim(fs::path(opt.out) / name, corpus[i]);
  }
  note("make-corpus: %zu images in %s", corpus.size(), opt.out.c_str());
}

void cmd_eval_semlink(const Common& opt, const std::string& corpus_dir) {
  const auto cfg = load(opt);
  const auto corpus = io::read_corpus(corpus_dir);
  const auto grid = io::snr_grid(cfg.sem.snr_min, cfg.sem.snr_max, cfg.sem.snr_step);
  const auto c = semlink::ssim_vs_snr_curve(corpus, grid, cfg.sem.trials, cfg.underwater(), cfg.budget(), cfg.seed);
  io::Csv t{{"snr_db", "mean_ssim", "stderr", "ceiling"}, {}};
  for (std::size_t s = 0; s < grid.size(); ++s) t.rows.push_back({grid[s], c.mean[s], c.std_error[s], c.ceiling});
  io::write_csv(opt.out, t, "eval-semlink", cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Delay-Doppler prediction and underwater semantic link experiments"};
  app.require_subcommand(1);
  Common opt;
  std::string data, cal, models, corpus, loss_csv, nmse_csv;

  auto* gen = app.add_subcommand("gen", "Generate a channel frame dataset");
  add_common(gen, opt);
  auto* calib = app.add_subcommand("calibrate", "Fit compression bases and tokenize the task windows");
  add_common(calib, opt);
  calib->add_option("dataset", data)->required()->check(CLI::ExistingFile);
  auto* train = app.add_subcommand("train", "Fit the three predictors");
  add_common(train, opt);
  train->add_option("calibration", cal)->required()->check(CLI::ExistingFile);
  train->add_option("--loss-csv", loss_csv, "Per-epoch transformer training loss");
  auto* cap = app.add_subcommand("eval-capacity", "Capacity-versus-SNR curves");
  add_common(cap, opt);
  cap->add_option("dataset", data)->required()->check(CLI::ExistingFile);
  cap->add_option("calibration", cal)->required()->check(CLI::ExistingFile);
  cap->add_option("models", models)->required()->check(CLI::ExistingFile);
  cap->add_option("--nmse-csv", nmse_csv, "Per-step NMSE of each predictor");
  auto* probe = app.add_subcommand("gen-uwa-probe", "Draw one underwater tap set");
  add_common(probe, opt);
  auto* mk = app.add_subcommand("make-corpus", "Write the synthetic image corpus");
  add_common(mk, opt);
  auto* sem = app.add_subcommand("eval-semlink", "SSIM-versus-SNR curve of the semantic link");
  add_common(sem, opt);
  sem->add_option("corpus", corpus)->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::InvalidConfig);
  }

  try {
    if (*gen) cmd_gen(opt);
    if (*calib) cmd_calibrate(opt, data);
    if (*train) cmd_train(opt, cal, loss_csv);
    if (*cap) cmd_eval_capacity(opt, data, cal, models, nmse_csv);
    if (*probe) cmd_gen_uwa_probe(opt);
    if (*mk) cmd_make_corpus(opt);
    if (*sem) cmd_eval_semlink(opt, corpus);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
