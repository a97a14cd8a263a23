// Streams a synthetic drive through the segmenter one frame at a time.
//
//   stream_segmentation [checkpoint]
//
// Without a checkpoint the desk-profile model is randomly initialized, so the
// labels are meaningless but the streaming mechanics and timings are real.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "mfseg/pipeline.hpp"

using namespace mfseg;

int main(int argc, char** argv) {
    Checkpoint ck;
    if (argc > 1 && std::filesystem::exists(argv[1])) {
        ck = load(argv[1]);
    } else {
        ck.config = desk_profile();
        ck.params = init_model(ck.config.model(), ck.config.seed);
        std::cerr << "no checkpoint given, using random desk-profile weights\n";
    }
    const ModelConfig model = ck.config.model();
    init_aggregator(ck.params, model, ck.config.seed);
    const ParamView view = constant_view(ck.params);

    synth::SceneSpec scene;
    scene.seed = 7;
    scene.frames = 12;
    scene.yaw_rate = 0.1;
    const auto frames = synth::generate(scene);

    // The state keeps per-frame features for the window, never raw points.
    AggregatorState state(ck.config.max_frames);
    std::printf("%5s %7s %7s %7s %9s %8s   class histogram\n", "frame", "points", "rows", "merged", "step ms", "acc");
    for (std::size_t i = 0; i < frames.size(); ++i) {
        Tape t(false);
        Stopwatch sw;
        state = step(t, state, extract(t, frames[i], view, model.lfe), view);
        const Value logits = predict_current(t, std::span(frames).subspan(i, 1), state.fused, view, model);
        const double ms = sw.lap_ms();

        std::vector<std::size_t> hist(model.dec.num_classes, 0);
        std::size_t correct = 0;
        const std::size_t c = model.dec.num_classes;
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            const double* row = logits.data().data() + r * c;
            const std::size_t best = static_cast<std::size_t>(std::max_element(row, row + c) - row);
            ++hist[best];
            correct += best == frames[i].labels[r];
        }
        std::printf("%5zu %7zu %7zu %7zu %9.1f %7.1f%%  ", i, frames[i].size(), state.fused.size(),
                    state.last_stats.pairs_merged, ms, 100.0 * static_cast<double>(correct) / static_cast<double>(logits.rows()));
        for (std::size_t k = 0; k < c; ++k) std::printf(" %s=%zu", synth::kClassNames[k].c_str(), hist[k]);
        std::printf("\n");
    }
}
