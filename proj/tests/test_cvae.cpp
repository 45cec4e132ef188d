#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "hetlab/cvae.hpp"

using namespace hetlab;

namespace {

CvaeDataset toy_dataset(int rows, int xw, int yw, int n_agents, uint64_t seed,
                        bool constant_y = false) {
    Rng rng(seed);
    CvaeDataset d;
    d.n_agents = n_agents;
    d.x = Mat(rows, xw);
    d.y = Mat(rows, yw);
    d.agent_ids.resize(size_t(rows));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < xw; ++c)
            d.x.at(r, c) = rng.uniform(-1, 1);
        for (int c = 0; c < yw; ++c)
            d.y.at(r, c) = constant_y ? 0.37 : rng.uniform(-1, 1);
        d.agent_ids[size_t(r)] = n_agents > 0 ? int(rng.below(uint64_t(n_agents))) : 0;
    }
    return d;
}

Vec flat_all(const CvaeLoss& l, bool with_id) {
    Vec out;
    auto push = [&](const GradBuffer& g) {
        for (size_t i = 0; i < g.dw.size(); ++i) {
            out.insert(out.end(), g.dw[i].a.begin(), g.dw[i].a.end());
            out.insert(out.end(), g.db[i].begin(), g.db[i].end());
        }
    };
    push(l.enc_grads);
    if (with_id)
        push(l.id_grads);
    push(l.dec_grads);
    return out;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

} // namespace

TEST_CASE("widths are validated per mode") {
    CvaeConfig cfg;
    cfg.hidden = 8;
    cfg.latent_dim = 3;
    CvaeModel mb = CvaeModel::make(CvaeMode::ModelBased, 5, 4, 0, cfg, 1);
    CHECK(mb.encoder.input_width() == 9);
    CHECK(mb.decoder.input_width() == 8);
    CHECK_THROWS_AS(mb.encode({1, 2, 3}, {1, 2, 3, 4}), StructuralError);
    CHECK_THROWS_AS(mb.encode_id(0, {1, 2, 3, 4, 5}), StateError);

    CvaeModel mf = CvaeModel::make(CvaeMode::ModelFree, 5, 4, 3, cfg, 1);
    CHECK(mf.encoder.input_width() == 5);
    CHECK(mf.id_head.input_width() == 3);
    CHECK(mf.id_head.output_width() == 6);
    CHECK_THROWS_AS(mf.encode({1, 2, 3, 4, 5}, {1, 2, 3, 4}), StateError);
}

TEST_CASE("untrained zero network encodes to the standard prior") {
    CvaeConfig cfg;
    cfg.hidden = 8;
    CvaeModel m = CvaeModel::make(CvaeMode::ModelBased, 3, 2, 0, cfg, 1);
    for (auto& l : m.encoder.layers) {
        l.w.zero();
        std::fill(l.b.begin(), l.b.end(), 0.0);
    }
    const GaussianHead h = m.encode({0.5, -0.5, 1.0}, {2.0, -1.0});
    for (int d = 0; d < h.dim(); ++d) {
        CHECK(h.mu[size_t(d)] == 0.0);
        CHECK(h.log_sigma[size_t(d)] == 0.0);
    }
    // determinism of encoding
    CvaeModel mf = CvaeModel::make(CvaeMode::ModelFree, 3, 2, 4, cfg, 2);
    const GaussianHead a = mf.encode_id(1, {0.1, 0.2, 0.3});
    const GaussianHead b = mf.encode_id(1, {0.1, 0.2, 0.3});
    CHECK(a.mu == b.mu);
    CHECK(a.log_sigma == b.log_sigma);
}

TEST_CASE("loss decomposes into reconstruction and prior-matching terms") {
    CvaeConfig cfg;
    cfg.hidden = 8;
    cfg.latent_dim = 4;
    cfg.beta = 0.7;
    CvaeModel m = CvaeModel::make(CvaeMode::ModelBased, 3, 2, 0, cfg, 5);
    Rng rng(9);
    const int B = 6;
    Mat x(B, 3), y(B, 2), eps(B, 4);
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < 3; ++c)
            x.at(b, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 2; ++c)
            y.at(b, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 4; ++c)
            eps.at(b, c) = rng.normal();
    }
    const CvaeLoss l = loss_model_based(m, x, y, eps);
    CHECK(l.recon >= 0.0);
    CHECK(l.kl >= 0.0);
    CHECK(l.loss == doctest::Approx(l.recon + 0.7 * l.kl).epsilon(1e-12));

    // beta = 0 isolates the reconstruction term
    CvaeModel m0 = m;
    m0.beta = 0.0;
    const CvaeLoss l0 = loss_model_based(m0, x, y, eps);
    CHECK(l0.loss == doctest::Approx(l0.recon).epsilon(1e-12));
    CHECK(l0.recon == doctest::Approx(l.recon).epsilon(1e-12));
}

TEST_CASE("perfect decoder with prior posterior gives zero loss") {
    CvaeConfig cfg;
    cfg.hidden = 4;
    cfg.latent_dim = 2;
    CvaeModel m = CvaeModel::make(CvaeMode::ModelBased, 2, 3, 0, cfg, 3);
    for (auto& l : m.encoder.layers) {
        l.w.zero();
        std::fill(l.b.begin(), l.b.end(), 0.0);
    }
    for (auto& l : m.decoder.layers) {
        l.w.zero();
        std::fill(l.b.begin(), l.b.end(), 0.0);
    }
    m.y_shift.clear(); // no standardization fitted: raw targets
    m.y_scale.clear();
    Mat x(2, 2), y(2, 3), eps(2, 2);
    // y identically zero is reproduced by the zero decoder; posterior = prior
    const CvaeLoss l = loss_model_based(m, x, y, eps);
    CHECK(l.recon == doctest::Approx(0.0));
    CHECK(l.kl == doctest::Approx(0.0));
    CHECK(l.loss == doctest::Approx(0.0));
}

TEST_CASE("model-based gradients match finite differences") {
    CvaeConfig cfg;
    cfg.hidden = 6;
    cfg.latent_dim = 3;
    cfg.beta = 0.9;
    CvaeModel m = CvaeModel::make(CvaeMode::ModelBased, 3, 2, 0, cfg, 11);
    Rng rng(13);
    const int B = 4;
    Mat x(B, 3), y(B, 2), eps(B, 3);
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < 3; ++c)
            x.at(b, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 2; ++c)
            y.at(b, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 3; ++c)
            eps.at(b, c) = rng.normal();
    }
    m.fit_y_standardization(y);
    const CvaeLoss l = loss_model_based(m, x, y, eps);
    const Vec analytic = flat_all(l, false);

    const double h = 1e-5;
    Vec enc_flat = m.encoder.flat_params();
    Vec dec_flat = m.decoder.flat_params();
    double worst = 0.0;
    size_t k = 0;
    for (size_t p = 0; p < enc_flat.size(); ++p, ++k) {
        const double keep = enc_flat[p];
        enc_flat[p] = keep + h;
        m.encoder.set_flat_params(enc_flat);
        const double up = loss_model_based(m, x, y, eps).loss;
        enc_flat[p] = keep - h;
        m.encoder.set_flat_params(enc_flat);
        const double dn = loss_model_based(m, x, y, eps).loss;
        enc_flat[p] = keep;
        worst = std::max(worst, rel_err(analytic[k], (up - dn) / (2 * h)));
    }
    m.encoder.set_flat_params(enc_flat);
    for (size_t p = 0; p < dec_flat.size(); ++p, ++k) {
        const double keep = dec_flat[p];
        dec_flat[p] = keep + h;
        m.decoder.set_flat_params(dec_flat);
        const double up = loss_model_based(m, x, y, eps).loss;
        dec_flat[p] = keep - h;
        m.decoder.set_flat_params(dec_flat);
        const double dn = loss_model_based(m, x, y, eps).loss;
        dec_flat[p] = keep;
        worst = std::max(worst, rel_err(analytic[k], (up - dn) / (2 * h)));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("model-free gradients match finite differences") {
    CvaeConfig cfg;
    cfg.hidden = 6;
    cfg.latent_dim = 3;
    cfg.beta = 0.5;
    CvaeModel m = CvaeModel::make(CvaeMode::ModelFree, 3, 2, 3, cfg, 17);
    // nonzero id head so its gradient path is exercised away from the origin
    Rng hrng(23);
    for (auto& v : m.id_head.layers[0].w.a)
        v = hrng.normal() * 0.1;
    Rng rng(19);
    const int B = 5;
    Mat x(B, 3), y(B, 2), eps(B, 3);
    std::vector<int> ids = {0, 1, 2, 1, 0};
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < 3; ++c)
            x.at(b, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 2; ++c)
            y.at(b, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 3; ++c)
            eps.at(b, c) = rng.normal();
    }
    m.fit_y_standardization(y);
    const CvaeLoss l = loss_model_free(m, x, y, ids, eps);
    const Vec analytic = flat_all(l, true);

    const double h = 1e-5;
    double worst = 0.0;
    size_t k = 0;
    auto sweep = [&](DenseNet& net) {
        Vec flat = net.flat_params();
        for (size_t p = 0; p < flat.size(); ++p, ++k) {
            const double keep = flat[p];
            flat[p] = keep + h;
            net.set_flat_params(flat);
            const double up = loss_model_free(m, x, y, ids, eps).loss;
            flat[p] = keep - h;
            net.set_flat_params(flat);
            const double dn = loss_model_free(m, x, y, ids, eps).loss;
            flat[p] = keep;
            worst = std::max(worst, rel_err(analytic[k], (up - dn) / (2 * h)));
        }
        net.set_flat_params(flat);
    };
    sweep(m.encoder);
    sweep(m.id_head);
    sweep(m.decoder);
    CHECK(worst < 1e-4);
}

TEST_CASE("training fits a constant target almost exactly") {
    CvaeConfig cfg;
    cfg.steps = 400;
    cfg.batch = 64;
    CvaeDataset d = toy_dataset(256, 3, 2, 0, 7, /*constant_y=*/true);
    CvaeModel m = train_cvae(d, CvaeMode::ModelBased, cfg, 2);
    CHECK(m.trained);
    Mat eps(64, cfg.latent_dim);
    Mat x(64, 3), y(64, 2);
    for (int r = 0; r < 64; ++r) {
        std::copy(d.x.row(r), d.x.row(r) + 3, x.row(r));
        std::copy(d.y.row(r), d.y.row(r) + 2, y.row(r));
    }
    CHECK(loss_model_based(m, x, y, eps).recon < 1e-3);
}

TEST_CASE("training is deterministic and reduces the loss") {
    CvaeConfig cfg;
    cfg.steps = 300;
    cfg.batch = 64;
    CvaeDataset d = toy_dataset(512, 4, 3, 4, 21);
    CvaeModel a = train_cvae(d, CvaeMode::ModelFree, cfg, 5);
    CvaeModel b = train_cvae(d, CvaeMode::ModelFree, cfg, 5);
    CHECK(a.encoder.flat_params() == b.encoder.flat_params());
    CHECK(a.id_head.flat_params() == b.id_head.flat_params());
    CHECK(a.decoder.flat_params() == b.decoder.flat_params());
    CHECK(a.final_loss < a.initial_loss);

    CvaeModel c = train_cvae(d, CvaeMode::ModelFree, cfg, 6);
    CHECK(a.encoder.flat_params() != c.encoder.flat_params());
}

TEST_CASE("training validates capacity and ids") {
    CvaeConfig cfg;
    cfg.batch = 256;
    CvaeDataset d = toy_dataset(64, 3, 2, 2, 3);
    CHECK_THROWS_AS(train_cvae(d, CvaeMode::ModelBased, cfg, 1), CapacityError);
    CvaeDataset no_ids = toy_dataset(512, 3, 2, 2, 3);
    no_ids.agent_ids.clear();
    cfg.batch = 64;
    CHECK_THROWS_AS(train_cvae(no_ids, CvaeMode::ModelFree, cfg, 1), StructuralError);
}

// with beta = 1 and pure-noise targets the posterior collapses onto the prior
TEST_CASE("prior matching: noise targets collapse the posterior") {
    CvaeConfig cfg;
    cfg.beta = 1.0;
    cfg.steps = 800;
    cfg.batch = 128;
    Rng rng(31);
    CvaeDataset d;
    d.n_agents = 0;
    d.x = Mat(1024, 2);
    d.y = Mat(1024, 3);
    for (int r = 0; r < 1024; ++r) {
        for (int c = 0; c < 2; ++c)
            d.x.at(r, c) = rng.uniform(-1, 1);
        for (int c = 0; c < 3; ++c)
            d.y.at(r, c) = rng.normal(); // unpredictable
    }
    CvaeModel m = train_cvae(d, CvaeMode::ModelBased, cfg, 4);
    double mean_kl = 0.0;
    for (int r = 0; r < 256; ++r)
        mean_kl += kl_to_standard_normal(m.encode(d.x.row_vec(r), d.y.row_vec(r)));
    mean_kl /= 256.0;
    CHECK(mean_kl < 0.1);
}

// per-agent losses agree for identical-behavior agents once converged
TEST_CASE("clone agents have matching model-free losses") {
    CvaeConfig cfg;
    cfg.steps = 600;
    cfg.batch = 128;
    Rng rng(41);
    // two agents with the same conditional law y = tanh(x) + id-independent
    CvaeDataset d;
    d.n_agents = 2;
    d.x = Mat(2048, 2);
    d.y = Mat(2048, 2);
    d.agent_ids.resize(2048);
    for (int r = 0; r < 2048; ++r) {
        for (int c = 0; c < 2; ++c) {
            d.x.at(r, c) = rng.uniform(-1, 1);
            d.y.at(r, c) = std::tanh(d.x.at(r, c));
        }
        d.agent_ids[size_t(r)] = r % 2;
    }
    CvaeModel m = train_cvae(d, CvaeMode::ModelFree, cfg, 9);
    // evaluate per-agent reconstruction on a held-out slice
    Mat eps(256, cfg.latent_dim);
    double loss[2] = {0.0, 0.0};
    for (int id = 0; id < 2; ++id) {
        Mat x(256, 2), y(256, 2);
        std::vector<int> ids(256, id);
        int k = 0;
        for (int r = 0; r < 2048 && k < 256; ++r) {
            if (d.agent_ids[size_t(r)] != id)
                continue;
            std::copy(d.x.row(r), d.x.row(r) + 2, x.row(k));
            std::copy(d.y.row(r), d.y.row(r) + 2, y.row(k));
            ++k;
        }
        loss[id] = loss_model_free(m, x, y, ids, eps).recon;
    }
    CHECK(std::abs(loss[0] - loss[1]) / std::max(loss[0], loss[1]) < 0.05);
}
