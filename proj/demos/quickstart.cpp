// Apache License, Version 2.0, refer to LICENSE.txt
//
// Minimal library walkthrough: synthesize measurements, bin them, train a
// small model, score it on held-out bins, and print any trigger regions.

#include <iostream>

#include "wxrisk/analysis.hpp"
#include "wxrisk/binning.hpp"
#include "wxrisk/dspp.hpp"
#include "wxrisk/metrics.hpp"
#include "wxrisk/synthetic.hpp"
#include "wxrisk/train.hpp"

int main() {
  wxrisk::SyntheticConfig scfg;
  scfg.n_measurements = 40000;
  scfg.seed = 7;
  wxrisk::StateDataset ds = wxrisk::generate_synthetic(scfg);
  std::cout << "generated " << ds.measurements.size()
            << " measurements for state " << ds.state << "\n";

  wxrisk::BinPolicy policy;
  policy.target = 150;
  policy.min_members = 600;
  policy.attempt_factor = 100;
  std::vector<int> selected = {0, 1, 2};
  auto bins = wxrisk::build_binned_dataset(ds, selected, policy, scfg.seed);
  auto [train, test] = wxrisk::split_train_test(bins, bins.size() / 5, scfg.seed);
  std::cout << "binned into " << bins.size() << " bins (" << train.size()
            << " train, " << test.size() << " test)\n";

  wxrisk::DsppArch arch;
  arch.layer_dims = {3, 1};
  arch.inducing = 24;
  arch.sites = 5;
  Eigen::MatrixXd x = wxrisk::bin_centers(train);
  Eigen::VectorXd y = wxrisk::bin_levels(train);
  wxrisk::DsppModel model = wxrisk::init_dspp(x, arch, scfg.seed,
                                              {"temperature", "wind_speed",
                                               "precipitation"});
  wxrisk::TrainConfig tc;
  tc.epochs = 25;
  tc.learning_rate = 0.03;
  tc.decay_epochs = {18};
  tc.batch = 64;
  tc.beta = 0.5;
  tc.seed = scfg.seed;
  wxrisk::train_dspp(model, x, y, tc);

  Eigen::MatrixXd xt = wxrisk::bin_centers(test);
  Eigen::VectorXd yt = wxrisk::bin_levels(test);
  wxrisk::DsppPrediction pred = wxrisk::dspp_predict(model, xt);
  std::cout << "held-out mape: " << wxrisk::mape(pred.mean, yt) << "\n";

  Eigen::VectorXd lo(3), hi(3);
  for (int d = 0; d < 3; ++d) {
    lo[d] = x.col(d).minCoeff();
    hi[d] = x.col(d).maxCoeff();
  }
  wxrisk::GridSpec grid = wxrisk::make_grid(lo, hi, {15, 15, 15});
  auto regions = wxrisk::trigger_regions(wxrisk::dspp_mean_predictor(model),
                                         grid, 0.5);
  std::cout << regions.size() << " trigger region(s) above 0.5\n";
  for (const auto& r : regions) {
    std::cout << "  " << r.cells.size() << " cells, bounds:";
    for (Eigen::Index d = 0; d < r.bounding_box.rows(); ++d)
      std::cout << " [" << r.bounding_box(d, 0) << ", " << r.bounding_box(d, 1)
                << "]";
    std::cout << "\n";
  }
  return 0;
}
