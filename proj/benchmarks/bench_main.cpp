// Throughput of the hot paths: encoding, one training step, one attack
// round, the training-time generator and cluster matching.

#include <benchmark/benchmark.h>
#include <torch/torch.h>

#include "scae/attack.hpp"
#include "scae/classifiers.hpp"
#include "scae/defense.hpp"
#include "scae/model.hpp"

using namespace scae;

namespace {

torch::Tensor digits(int batch, int size) {
  torch::manual_seed(0);
  auto x = torch::zeros({batch, size, size});
  const int lo = size / 2 - 8, hi = size / 2 + 8;
  x.slice(1, lo, hi).slice(2, lo, hi).copy_(torch::rand({batch, hi - lo, hi - lo}));
  return x;
}

model::ScaeConfig config_for(int which) {
  return which == 0 ? model::ScaeConfig::desk() : model::ScaeConfig::paper();
}

void BM_Encode(benchmark::State& state) {
  torch::set_num_threads(1);
  auto cfg = config_for(static_cast<int>(state.range(1)));
  auto m = model::init_model(cfg, 0);
  auto x = digits(static_cast<int>(state.range(0)), cfg.canvas_size);
  torch::NoGradGuard no_grad;
  for (auto _ : state) {
    auto out = m->encode(x);
    benchmark::DoNotOptimize(out.reconstruction.data_ptr());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Encode)->Args({100, 0})->Args({100, 1})->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  torch::set_num_threads(1);
  auto cfg = model::ScaeConfig::desk();
  auto m = model::init_model(cfg, 0);
  auto x = digits(100, cfg.canvas_size);
  torch::optim::RMSprop opt(m->parameters(), torch::optim::RMSpropOptions(3e-4));
  for (auto _ : state) {
    auto loss = defense::loss_at(x, x, m, {.training = true}).total;
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

// One outer round (n_inner + 1 forward/backward passes) on a batch.
void BM_AttackRound(benchmark::State& state) {
  torch::set_num_threads(1);
  auto cfg = model::ScaeConfig::desk();
  auto m = model::init_model(cfg, 0);
  auto x = digits(static_cast<int>(state.range(0)), cfg.canvas_size);
  auto a = attack::AttackConfig::evaluation_profile();
  a.n_outer = 1;
  attack::ConstantPredictor never(0);
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(state.range(0)));
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
  for (auto _ : state) {
    auto r = attack::run_attack_batch(x, m, never, a, seeds);
    benchmark::DoNotOptimize(r.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_AttackRound)->Arg(1)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_Hungarian(benchmark::State& state) {
  const auto n = state.range(0);
  auto cost = torch::rand({n, n}, torch::kFloat64);
  for (auto _ : state) {
    auto perm = classify::hungarian_match(cost);
    benchmark::DoNotOptimize(perm.data());
  }
}
BENCHMARK(BM_Hungarian)->Arg(10)->Arg(24)->Arg(100);

void BM_KMeansFit(benchmark::State& state) {
  torch::manual_seed(1);
  auto x = torch::rand({state.range(0), 24}, torch::kFloat64);
  auto y = torch::randint(0, 10, {state.range(0)}, torch::kInt64);
  for (auto _ : state) {
    auto clf = classify::fit_kmeans_classifier(x, y, {.k = 10, .seed = 0});
    benchmark::DoNotOptimize(clf.centers.data_ptr());
  }
}
BENCHMARK(BM_KMeansFit)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

}  // namespace

// Single-threaded intra-op so numbers match the training and attack setups.
int main(int argc, char** argv) {
  torch::set_num_threads(1);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
