#ifndef HETLAB_CVAE_HPP
#define HETLAB_CVAE_HPP

#include "hetlab/tinynet.hpp"

namespace hetlab {

enum class CvaeMode { ModelBased, ModelFree };

struct CvaeConfig {
    int latent_dim = 8;
    int hidden = 64;
    // Weight on the prior-matching term. The identity-specific share of a
    // standardized target is a few percent of its variance, so the full ELBO
    // weight of 1.0 collapses every posterior onto the prior and erases the
    // distances; 0.01 keeps the bottleneck open while still anchoring clones.
    double beta = 0.01;
    int steps = 2000;
    int batch = 256;
    double lr = 1e-3;
};

// Training rows. Model-based rows are (x, y); model-free rows additionally
// carry the agent id that produced y.
struct CvaeDataset {
    Mat x;
    Mat y;
    std::vector<int> agent_ids; // empty in the model-based regime
    int n_agents = 0;

    int rows() const { return x.rows; }
};

// Conditional VAE. Model-based: encoder f(z|y,x), decoder g(y|z,x), a
// reconstruction task. Model-free: encoder f(z|i,x) realized as a shared
// condition backbone plus an additive per-id head, decoder g(y|z,x), a
// prediction task where the latent is the only path carrying the agent id.
//
// Two structural points in the model-free regime. Feeding the id to the
// decoder as well lets the ELBO optimum ignore z entirely and every posterior
// collapse onto the prior, killing all distances, so the decoder sees only
// (z, x). And fitting a fully joint (id, x) encoder lets each id bend the
// x-map around its own trajectory data, so even clones drift apart by
// interpolation error; the additive id head shares one x-backbone across
// agents and starts at zero, so ids separate only where their data demands
// it. The latent prior is the standard Gaussian in both regimes.
struct CvaeModel {
    CvaeMode mode = CvaeMode::ModelBased;
    int cond_width = 0;
    int y_width = 0;
    int n_agents = 0; // one-hot id width, model-free only
    int latent_dim = 8;
    double beta = 1.0;
    DenseNet encoder; // model-based: (y, x) -> raw head; model-free: x -> raw head
    DenseNet id_head; // model-free only: one-hot id -> additive raw head offset
    DenseNet decoder;
    // per-dimension target standardization, fitted on the training set; keeps
    // low-variance target blocks (velocity caps, force drift) from drowning
    // under wide observation dims
    Vec y_shift;
    Vec y_scale;
    bool trained = false;
    double initial_loss = 0.0;
    double final_loss = 0.0;

    int encoder_input_width() const {
        return (mode == CvaeMode::ModelBased ? y_width : 0) + cond_width;
    }
    int decoder_input_width() const { return latent_dim + cond_width; }

    static CvaeModel make(CvaeMode mode, int cond_width, int y_width, int n_agents,
                          const CvaeConfig& cfg, uint64_t seed) {
        CvaeModel m;
        m.mode = mode;
        m.cond_width = cond_width;
        m.y_width = y_width;
        m.n_agents = n_agents;
        m.latent_dim = cfg.latent_dim;
        m.beta = cfg.beta;
        Rng rng(hash_combine(seed, 0x63766165ULL));
        m.encoder = DenseNet::make(
            {m.encoder_input_width(), cfg.hidden, cfg.hidden, 2 * cfg.latent_dim}, rng);
        m.decoder =
            DenseNet::make({m.decoder_input_width(), cfg.hidden, cfg.hidden, y_width}, rng);
        if (mode == CvaeMode::ModelFree)
            m.id_head = DenseNet::zeros({n_agents, 2 * cfg.latent_dim});
        return m;
    }

    Vec standardize_y(const Vec& y) const {
        if (y_shift.empty())
            return y;
        Vec out(y.size());
        for (size_t i = 0; i < y.size(); ++i)
            out[i] = (y[i] - y_shift[i]) / y_scale[i];
        return out;
    }

    void fit_y_standardization(const Mat& y) {
        y_shift.assign(size_t(y_width), 0.0);
        y_scale.assign(size_t(y_width), 1.0);
        for (int c = 0; c < y.cols; ++c) {
            double m = 0.0;
            for (int r = 0; r < y.rows; ++r)
                m += y.at(r, c);
            m /= y.rows;
            double v = 0.0;
            for (int r = 0; r < y.rows; ++r)
                v += sqr(y.at(r, c) - m);
            y_shift[size_t(c)] = m;
            y_scale[size_t(c)] = std::max(std::sqrt(v / y.rows), 1e-2);
        }
    }

    Vec encoder_input(const Vec& x, const Vec& y) const {
        if (mode != CvaeMode::ModelBased)
            throw StateError("CvaeModel: (y,x) encoding requires model-based mode");
        if (int(x.size()) != cond_width || int(y.size()) != y_width)
            throw StructuralError("CvaeModel::encode: width mismatch");
        const Vec ys = standardize_y(y);
        Vec in;
        in.reserve(ys.size() + x.size());
        in.insert(in.end(), ys.begin(), ys.end());
        in.insert(in.end(), x.begin(), x.end());
        return in;
    }

    GaussianHead encode(const Vec& x, const Vec& y) const {
        return GaussianHead::from_raw(forward1(encoder, encoder_input(x, y)));
    }

    GaussianHead encode_id(int agent, const Vec& x) const {
        if (mode != CvaeMode::ModelFree)
            throw StateError("CvaeModel: (i,x) encoding requires model-free mode");
        if (int(x.size()) != cond_width)
            throw StructuralError("CvaeModel::encode: condition width mismatch");
        Vec raw = forward1(encoder, x);
        const Vec off = forward1(id_head, one_hot(agent, n_agents));
        for (size_t c = 0; c < raw.size(); ++c)
            raw[c] += off[c];
        return GaussianHead::from_raw(raw);
    }
};

struct CvaeLoss {
    double loss = 0.0;
    double recon = 0.0; // mean squared reconstruction error per dim
    double kl = 0.0;    // mean prior-matching term
    GradBuffer enc_grads;
    GradBuffer id_grads;
    GradBuffer dec_grads;
};

namespace detail {

// Shared forward/backward over one assembled batch. enc_in rows are [y|x]
// (model-based) or [x] (model-free, with id one-hots in id_onehot); cond is
// the decoder condition [x].
inline CvaeLoss cvae_loss_on_batch(const CvaeModel& model, const Mat& enc_in, const Mat& cond,
                                   const Mat& y, const Mat& eps,
                                   const Mat* id_onehot = nullptr) {
    const int B = enc_in.rows;
    const int d = model.latent_dim;
    const int yw = model.y_width;

    CvaeLoss out;
    out.enc_grads = GradBuffer(model.encoder);
    out.dec_grads = GradBuffer(model.decoder);

    ForwardCache enc_cache;
    Mat raw = forward(model.encoder, enc_in, &enc_cache);
    ForwardCache id_cache;
    if (id_onehot) {
        out.id_grads = GradBuffer(model.id_head);
        Mat off = forward(model.id_head, *id_onehot, &id_cache);
        for (size_t i = 0; i < raw.a.size(); ++i)
            raw.a[i] += off.a[i];
    }

    Mat mu(B, d), ls(B, d), sigma(B, d);
    std::vector<char> clamped(size_t(B) * size_t(d));
    for (int b = 0; b < B; ++b) {
        const double* rr = raw.row(b);
        for (int c = 0; c < d; ++c) {
            mu.at(b, c) = rr[c];
            const double v = rr[d + c];
            const double cl = std::clamp(v, kLogSigmaMin, kLogSigmaMax);
            ls.at(b, c) = cl;
            sigma.at(b, c) = std::exp(cl);
            clamped[size_t(b) * size_t(d) + size_t(c)] = (v != cl);
        }
    }

    Mat dec_in(B, model.decoder_input_width());
    for (int b = 0; b < B; ++b) {
        double* dr = dec_in.row(b);
        for (int c = 0; c < d; ++c)
            dr[c] = mu.at(b, c) + sigma.at(b, c) * eps.at(b, c);
        const double* cr = cond.row(b);
        for (int c = 0; c < cond.cols; ++c)
            dr[d + c] = cr[c];
    }

    ForwardCache dec_cache;
    Mat yhat = forward(model.decoder, dec_in, &dec_cache);

    double recon = 0.0, kl = 0.0;
    for (int b = 0; b < B; ++b) {
        const double* yr = y.row(b);
        const double* hr = yhat.row(b);
        double se = 0.0;
        for (int c = 0; c < yw; ++c)
            se += sqr(hr[c] - yr[c]);
        recon += se / double(yw);
        for (int c = 0; c < d; ++c) {
            const double m = mu.at(b, c), s2 = sqr(sigma.at(b, c));
            kl += 0.5 * (m * m + s2 - 1.0 - 2.0 * ls.at(b, c));
        }
    }
    recon /= double(B);
    kl /= double(B);
    out.recon = recon;
    out.kl = kl;
    out.loss = recon + model.beta * kl;
    if (!is_finite(out.loss))
        throw NumericError("cvae loss is not finite");

    // backward
    Mat dyhat(B, yw);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < yw; ++c)
            dyhat.at(b, c) = 2.0 * (yhat.at(b, c) - y.at(b, c)) / double(yw) / double(B);
    Mat ddec_in = backward(model.decoder, dec_cache, dyhat, out.dec_grads);

    Mat denc_out(B, 2 * d);
    const double kb = model.beta / double(B);
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < d; ++c) {
            const double dz = ddec_in.at(b, c);
            denc_out.at(b, c) = dz + kb * mu.at(b, c);
            double dls = dz * eps.at(b, c) * sigma.at(b, c) + kb * (sqr(sigma.at(b, c)) - 1.0);
            if (clamped[size_t(b) * size_t(d) + size_t(c)])
                dls = 0.0;
            denc_out.at(b, d + c) = dls;
        }
    }
    backward(model.encoder, enc_cache, denc_out, out.enc_grads);
    if (id_onehot)
        backward(model.id_head, id_cache, denc_out, out.id_grads);
    return out;
}

} // namespace detail

// ELBO-derived loss for the reconstruction regime: per row,
// |y - g(z, x)|^2 / y_width + beta * KL(f(z|y,x) || N(0,I)), z reparameterized.
inline CvaeLoss loss_model_based(const CvaeModel& model, const Mat& x, const Mat& y,
                                 const Mat& eps) {
    if (model.mode != CvaeMode::ModelBased)
        throw StateError("loss_model_based: model is not in model-based mode");
    if (x.rows != y.rows || x.rows != eps.rows)
        throw StructuralError("loss_model_based: row count mismatch");
    if (x.cols != model.cond_width || y.cols != model.y_width || eps.cols != model.latent_dim)
        throw StructuralError("loss_model_based: column width mismatch");
    Mat ys(y.rows, y.cols);
    for (int b = 0; b < y.rows; ++b) {
        const Vec row = model.standardize_y(y.row_vec(b));
        std::copy(row.begin(), row.end(), ys.row(b));
    }
    Mat enc_in(x.rows, model.encoder_input_width());
    for (int b = 0; b < x.rows; ++b) {
        double* r = enc_in.row(b);
        std::copy(ys.row(b), ys.row(b) + ys.cols, r);
        std::copy(x.row(b), x.row(b) + x.cols, r + ys.cols);
    }
    return detail::cvae_loss_on_batch(model, enc_in, x, ys, eps);
}

// Prediction regime: the posterior is backbone(x) + id_head(one-hot); the
// decoder sees only (z, x), so identity information must survive through z.
inline CvaeLoss loss_model_free(const CvaeModel& model, const Mat& x, const Mat& y,
                                const std::vector<int>& agent_ids, const Mat& eps) {
    if (model.mode != CvaeMode::ModelFree)
        throw StateError("loss_model_free: model is not in model-free mode");
    if (x.rows != y.rows || x.rows != eps.rows || int(agent_ids.size()) != x.rows)
        throw StructuralError("loss_model_free: row count mismatch");
    if (x.cols != model.cond_width || y.cols != model.y_width || eps.cols != model.latent_dim)
        throw StructuralError("loss_model_free: column width mismatch");
    const int N = model.n_agents;
    Mat ys(y.rows, y.cols);
    for (int b = 0; b < y.rows; ++b) {
        const Vec row = model.standardize_y(y.row_vec(b));
        std::copy(row.begin(), row.end(), ys.row(b));
    }
    Mat ids(x.rows, N);
    for (int b = 0; b < x.rows; ++b) {
        const int id = agent_ids[size_t(b)];
        if (id < 0 || id >= N)
            throw StructuralError("loss_model_free: agent id out of range");
        ids.at(b, id) = 1.0;
    }
    return detail::cvae_loss_on_batch(model, x, x, ys, eps, &ids);
}

// Fixed-step training loop; deterministic per seed; returns a frozen model.
inline CvaeModel train_cvae(const CvaeDataset& data, CvaeMode mode, const CvaeConfig& cfg,
                            uint64_t seed) {
    if (data.rows() < cfg.batch)
        throw CapacityError("train_cvae: dataset smaller than one batch");
    if (mode == CvaeMode::ModelFree && data.agent_ids.empty())
        throw StructuralError("train_cvae: model-free training needs agent ids");

    CvaeModel model = CvaeModel::make(mode, data.x.cols, data.y.cols, data.n_agents, cfg, seed);
    model.fit_y_standardization(data.y);
    OptimState enc_opt(model.encoder, cfg.lr);
    OptimState dec_opt(model.decoder, cfg.lr);
    OptimState id_opt;
    if (mode == CvaeMode::ModelFree)
        id_opt = OptimState(model.id_head, cfg.lr);
    Rng rng(hash_combine(seed, 0x747261696eULL));

    Mat bx(cfg.batch, data.x.cols), by(cfg.batch, data.y.cols), eps(cfg.batch, cfg.latent_dim);
    std::vector<int> bids(size_t(cfg.batch));
    for (int it = 0; it < cfg.steps; ++it) {
        for (int b = 0; b < cfg.batch; ++b) {
            const int row = int(rng.below(uint64_t(data.rows())));
            std::copy(data.x.row(row), data.x.row(row) + data.x.cols, bx.row(b));
            std::copy(data.y.row(row), data.y.row(row) + data.y.cols, by.row(b));
            if (mode == CvaeMode::ModelFree)
                bids[size_t(b)] = data.agent_ids[size_t(row)];
            for (int c = 0; c < cfg.latent_dim; ++c)
                eps.at(b, c) = rng.normal();
        }
        CvaeLoss l = mode == CvaeMode::ModelBased
                         ? loss_model_based(model, bx, by, eps)
                         : loss_model_free(model, bx, by, bids, eps);
        if (it == 0)
            model.initial_loss = l.loss;
        model.final_loss = l.loss;
        optim_step(model.encoder, l.enc_grads, enc_opt);
        optim_step(model.decoder, l.dec_grads, dec_opt);
        if (mode == CvaeMode::ModelFree)
            optim_step(model.id_head, l.id_grads, id_opt);
    }
    model.trained = true;
    return model;
}

// checkpoint = tinynet blobs + mode manifest
inline void save_cvae(const CvaeModel& m, const std::string& prefix) {
    save_net(m.encoder, prefix + "_encoder");
    save_net(m.decoder, prefix + "_decoder");
    if (m.mode == CvaeMode::ModelFree)
        save_net(m.id_head, prefix + "_idhead");
    std::ostringstream js;
    js << "{\"mode\":\"" << (m.mode == CvaeMode::ModelBased ? "model_based" : "model_free")
       << "\",\"cond_width\":" << m.cond_width << ",\"y_width\":" << m.y_width
       << ",\"n_agents\":" << m.n_agents << ",\"latent_dim\":" << m.latent_dim
       << ",\"beta\":" << fmt_double(m.beta) << ",\"trained\":" << (m.trained ? "true" : "false")
       << "}";
    write_file(prefix + "_mode.json", js.str());
}

} // namespace hetlab

#endif // HETLAB_CVAE_HPP
