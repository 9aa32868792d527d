#include <benchmark/benchmark.h>

#include "spotdiff/conditioning.hpp"
#include "spotdiff/corpus.hpp"
#include "spotdiff/diffusion.hpp"
#include "spotdiff/disentangler.hpp"
#include "spotdiff/feature_extraction.hpp"

using namespace spotdiff;

namespace {

LayerFeatureSet random_set(Rng& rng, int d) { return LayerFeatureSet(Tensor::from({5, d}, rng.normal_vector(5 * d))); }

TextEncoderModel text_encoder() {
  std::vector<std::string> subjects(kShapeFamilies.begin(), kShapeFamilies.end());
  Rng rng(1);
  return TextEncoderModel(Lexicon::build(default_template_bank(), subjects), 64, 128, rng);
}

ConditionBatch condition_batch(const TextEncoderModel& te, int batch) {
  std::vector<ConditionEmbedding> conds;
  for (int i = 0; i < batch; ++i)
    conds.push_back(build_text_condition(PromptTemplate("a photo of a S*"), kShapeFamilies[i % 6], te));
  return ConditionBatch::stack(conds);
}

}  // namespace

static void BM_ProjectOut(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  Rng rng(1);
  const auto v = rng.normal_vector(d), u = rng.normal_vector(d);
  for (auto _ : state) benchmark::DoNotOptimize(project_out(v, u, 1e-12 * d));
}
BENCHMARK(BM_ProjectOut)->Arg(8)->Arg(64)->Arg(768);

static void BM_Decouple(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  const DecoupleMode mode = state.range(1) ? DecoupleMode::kJoint : DecoupleMode::kSequential;
  Rng rng(2);
  const LayerFeatureSet main = random_set(rng, d);
  const NuisanceFeatureSet pose{NuisanceFactor::kPose, FeatureOrigin::kPredicted, random_set(rng, d)};
  const NuisanceFeatureSet bg{NuisanceFactor::kBackground, FeatureOrigin::kPredicted, random_set(rng, d)};
  DecoupleOptions opt;
  opt.mode = mode;
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(decouple(main, pose, bg, opt));
}
BENCHMARK(BM_Decouple)->Args({64, 0})->Args({64, 1})->Args({768, 0})->Args({768, 1});

static void BM_Render(benchmark::State& state) {
  FactorSpec f;
  f.identity = {2, 3, 1};
  f.pose = {0.4, 2.0, -1.0, 0.3};
  f.background = {2, 1};
  for (auto _ : state) benchmark::DoNotOptimize(render(f, true));
}
BENCHMARK(BM_Render)->Unit(benchmark::kMicrosecond);

static void BM_EncoderForward(benchmark::State& state) {
  Rng rng(3);
  EncoderModel enc(EncoderConfig{}, rng);
  ImageTensor img(32, 32, 3);
  for (double& p : img.pixels()) p = rng.uniform();
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(encode_image(img, enc));
}
BENCHMARK(BM_EncoderForward)->Unit(benchmark::kMicrosecond);

static void BM_DenoiserForward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  Rng rng(4);
  DenoiserModel model(DenoiserConfig{}, rng);
  const TextEncoderModel te = text_encoder();
  const ConditionBatch cond = condition_batch(te, batch);
  const Tensor z = Tensor::from({batch, 3, 32, 32}, rng.normal_vector(static_cast<std::size_t>(batch) * 3 * 32 * 32));
  const std::vector<int> t(static_cast<std::size_t>(batch), 50);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(z, t, cond));
}
BENCHMARK(BM_DenoiserForward)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_DenoiserTrainStep(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  Rng rng(5);
  DenoiserModel model(DenoiserConfig{}, rng);
  const TextEncoderModel te = text_encoder();
  const ConditionBatch cond = condition_batch(te, batch);
  const NoiseSchedule schedule = build_schedule(100, ScheduleKind::kLinear);
  const Tensor z0 = Tensor::from({batch, 3, 32, 32}, rng.normal_vector(static_cast<std::size_t>(batch) * 3 * 32 * 32));
  const Tensor eps = Tensor::from(z0.shape(), rng.normal_vector(static_cast<std::size_t>(z0.numel())));
  const std::vector<int> t(static_cast<std::size_t>(batch), 50);
  const auto params = model.parameters();
  for (const auto& p : params) {
    Tensor x = p.tensor;
    x.set_requires_grad(true);
  }
  for (auto _ : state) {
    for (const auto& p : params) {
      Tensor x = p.tensor;
      x.zero_grad();
    }
    Tensor loss = ldm_loss(z0, t, eps, cond, model, schedule);
    loss.backward();
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_DenoiserTrainStep)->Arg(8)->Unit(benchmark::kMillisecond);

static void BM_DdimSample(benchmark::State& state) {
  Rng rng(6);
  DenoiserModel model(DenoiserConfig{}, rng);
  const TextEncoderModel te = text_encoder();
  const ConditionBatch cond = condition_batch(te, 1);
  const NoiseSchedule schedule = build_schedule(100, ScheduleKind::kLinear);
  for (auto _ : state)
    benchmark::DoNotOptimize(sample(cond, model, schedule, LatentCodec{}, SamplerKind::kDdim, 25, 7));
}
BENCHMARK(BM_DdimSample)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
