// Trains a small 2x attention super-resolution model on synthetic images,
// then upscales a held-out image and writes it next to the bicubic result.
//
//   demo_upsample [out_dir] [steps]
#include <filesystem>
#include <iostream>

#include "atup/synth.hpp"
#include "atup/train.hpp"

int main(int argc, char** argv) try {
  namespace fs = std::filesystem;
  const fs::path out = argc > 1 ? argv[1] : "demo_out";
  const long steps = argc > 2 ? std::stol(argv[2]) : 300;
  fs::create_directories(out);

  atup::Rng rng(1);
  atup::SisrDataset<float> data;
  for (int i = 0; i < 8; ++i) data.train.push_back(atup::rgb_to_y<float>(atup::synth::natural_like(64, 64, rng)));
  const auto held_out = atup::synth::natural_like(96, 96, rng);
  data.eval.push_back(atup::rgb_to_y<float>(held_out));

  atup::SisrSpec spec;
  spec.features = 16;
  atup::SisrModel<float> model(spec, 1);
  atup::TrainConfig cfg;
  cfg.batch = 8;
  cfg.epochs = 1000000;
  cfg.max_steps = steps;
  cfg.schedule = atup::ScheduleKind::constant;
  cfg.eval_every = 10;
  const auto r = atup::train_sisr(model, data, cfg, &std::cout);
  for (const auto& e : atup::decode_checkpoint(r.best_checkpoint))
    model.params()[e.name]->value = e.value.cast<float>();

  const auto& hr = data.eval[0];
  const auto lr = atup::make_lr(hr, 2);
  const auto sr = model.predict(lr);
  const auto bic = atup::bicubic_resize(lr, hr.dim(1), hr.dim(2));
  atup::save_png(out / "hr.png", held_out);
  atup::save_png(out / "lr.png", atup::to_image(lr));
  atup::save_png(out / "bicubic.png", atup::to_image(bic));
  atup::save_png(out / "attention.png", atup::to_image(sr));
  const auto s = atup::score_sisr(sr, hr, 2), b = atup::score_sisr(bic, hr, 2);
  std::cout << "held-out PSNR: attention " << atup::format_metric(s.psnr_db) << " dB, bicubic "
            << atup::format_metric(b.psnr_db) << " dB\nimages in " << out.string() << "\n";
  return 0;
} catch (const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  return 1;
}
