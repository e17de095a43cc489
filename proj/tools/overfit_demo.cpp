// Trains tiny networks on one synthetic pair and prints the frame trajectory.
//   overfit_demo [steps] [pair_seed]
#include <cstdlib>
#include <iostream>

#include "ddm/ddm.hpp"

using namespace ddm;

int main(int argc, char** argv) {
    const int steps = argc > 1 ? std::atoi(argv[1]) : 500;
    const std::uint64_t pair_seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 3;

    NetworkConfig net;
    net.diffusion_channels = {4, 8, 8, 8};
    net.deform_encoder = {4, 8, 8, 8};
    net.deform_decoder = {8, 8, 8};
    net.deform_extra = {4};
    net.time_embed_dim = 16;
    TrainConfig cfg;
    cfg.ncc_window = 7;

    const SubjectRecord pair = make_synthetic_pair(pair_seed, net.image_shape, 3.0);
    TrainState st = make_train_state(net, cfg);
    const NoiseSchedule schedule = schedule_for(cfg);
    for (int s = 1; s <= steps; ++s) {
        const LossBreakdown l = train_step(st, pair.ed, pair.es, schedule, cfg);
        if (s == 1 || s % 100 == 0)
            std::cout << "step " << s << "  total " << l.total << "  ncc " << -l.deform_similarity << "\n";
    }

    const auto labels = foreground_labels(*pair.ed_seg);
    const Sequence seq = generate_sequence(st.weights, pair.ed, pair.es, 11);
    std::cout << "gamma  mean|phi|  ncc(frame,T)  dice\n";
    for (const Frame& f : seq.frames)
        std::cout << f.gamma << "  " << mean_magnitude(f.field) << "  " << local_ncc(f.image, pair.es, 7) << "  "
                  << dice(warp_nearest(*pair.ed_seg, f.field), *pair.es_seg, labels).mean << "\n";
}
