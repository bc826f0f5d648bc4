#include <benchmark/benchmark.h>

#include "headpose/icp_tracker.hpp"
#include "headpose/nn.hpp"
#include "headpose/phantom_sim.hpp"
#include "headpose/roi_detector.hpp"

namespace {

using namespace headpose;

struct Scene {
  HeadPhantom phantom = build_phantom(1, 20000);
  VirtualCamera camera;
  RigidTransform pose{UnitQuaternion::from_axis_angle(Vec3(0.2, 1.0, 0.1).normalized(), 0.2), Vec3(10, -5, 700)};
  Frame frame = render_frame(phantom, camera, pose, 42);
  Template tmpl = template_from_scan(simulate_head_scan(phantom, 3000, 21));
};

const Scene& scene() {
  static const Scene s;
  return s;
}

void BM_RenderFrame(benchmark::State& state) {
  const auto& s = scene();
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(render_frame(s.phantom, s.camera, s.pose, ++seed));
}
BENCHMARK(BM_RenderFrame)->Unit(benchmark::kMillisecond);

void BM_HogFeatures(benchmark::State& state) {
  const GrayImage img = ir_image(scene().frame);
  for (auto _ : state) benchmark::DoNotOptimize(hog_features(img));
}
BENCHMARK(BM_HogFeatures)->Unit(benchmark::kMicrosecond);

void BM_DetectSlidingWindow(benchmark::State& state) {
  LinearDetector d;
  d.weights.assign(d.descriptor_length(), 0.01);
  d.threshold = -1e9;
  const GrayImage img = ir_image(scene().frame);
  for (auto _ : state) benchmark::DoNotOptimize(detect(img, d));
}
BENCHMARK(BM_DetectSlidingWindow)->Unit(benchmark::kMicrosecond);

void BM_KdTreeBuild(benchmark::State& state) {
  const auto pts = depth_to_surface_points(scene().frame, scene().camera, 3);
  for (auto _ : state) benchmark::DoNotOptimize(KdTree(pts));
  state.counters["points"] = static_cast<double>(pts.size());
}
BENCHMARK(BM_KdTreeBuild)->Unit(benchmark::kMillisecond);

void BM_IcpRegister(benchmark::State& state) {
  const auto& s = scene();
  const KdTree tree(depth_to_surface_points(s.frame, s.camera, 3));
  const RigidTransform init{UnitQuaternion(), s.pose.translation + Vec3(8, -6, 10)};
  int iterations = 0;
  for (auto _ : state) {
    const auto r = icp_register(s.tmpl, tree, init);
    iterations = r.iterations;
    benchmark::DoNotOptimize(r.pose);
  }
  state.counters["iterations"] = iterations;
}
BENCHMARK(BM_IcpRegister)->Unit(benchmark::kMillisecond);

void BM_CnnForward(benchmark::State& state, bool multi) {
  const nn::ArchConfig arch;
  const nn::Model<float> model(multi ? nn::build_multiscale_model(arch) : nn::build_singlepath_model(arch), 1);
  const auto batch = static_cast<int>(state.range(0));
  std::vector<nn::Tensor4<float>> inputs{nn::Tensor4<float>(batch, arch.full_height(), arch.full_width(), 5, 0.3f)};
  if (multi) inputs.emplace_back(batch, arch.crop, arch.crop, 5, 0.3f);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(inputs));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK_CAPTURE(BM_CnnForward, single, false)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_CnnForward, multi, true)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_CnnTrainStep(benchmark::State& state) {
  const nn::ArchConfig arch;
  nn::Model<float> model(nn::build_multiscale_model(arch), 1);
  nn::AdamState<float> adam(model.parameter_count(), {});
  std::vector<nn::Tensor4<float>> inputs{nn::Tensor4<float>(16, arch.full_height(), arch.full_width(), 5, 0.3f),
                                         nn::Tensor4<float>(16, arch.crop, arch.crop, 5, 0.3f)};
  const nn::Tensor4<float> target(16, 1, 1, nn::kPoseOutputs, 0.5f);
  for (auto _ : state) {
    const auto pred = model.forward(inputs);
    const auto [loss, grad] = nn::mse_loss(pred, target);
    model.zero_grad();
    model.backward(grad);
    nn::adam_step<float>(model.params(), model.grads(), adam, model.blocks());
    benchmark::DoNotOptimize(loss);
  }
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_CnnTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
