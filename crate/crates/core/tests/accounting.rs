use polyglot_core::continual::{parameter_report, planned_blueprint, StrategyKind};
use polyglot_core::model::{ModelConfig, TaskId};

struct Counts {
    frontend: usize,
    input_proj: usize,
    mask: usize,
    pos_conv: usize,
    final_norm: usize,
    layer_attn: usize,
    layer_ffn: usize,
    layer_norms: usize,
    final_proj: usize,
    quantizer: usize,
    heads: usize,
    adapter: usize,
}

/// Per-layer closed forms, written out independently of the layout code.
fn closed_form(c: &ModelConfig) -> Counts {
    let mut frontend = 0;
    let mut c_in = 1;
    for b in &c.frontend.blocks {
        frontend += b.channels * c_in * b.kernel + 2 * b.channels;
        c_in = b.channels;
    }
    let dz = c_in;
    let d = c.encoder.model_dim;
    let ff = c.encoder.ffn_dim;
    let q = &c.quantizer;
    let gv = q.groups * q.entries;
    let b = c.adapter.bottleneck;
    Counts {
        frontend,
        input_proj: dz * d + d,
        mask: d,
        pos_conv: d * (d / c.encoder.pos_conv_groups) * c.encoder.pos_conv_kernel + d,
        final_norm: 2 * d,
        layer_attn: 4 * d * d + 4 * d,
        layer_ffn: d * ff + ff + ff * d + d,
        layer_norms: 4 * d,
        final_proj: d * q.target_dim + q.target_dim,
        quantizer: dz * gv + gv + gv * (q.codevector_dim / q.groups) + q.codevector_dim * q.target_dim + q.target_dim,
        heads: (dz * d + d) + (d * q.target_dim + q.target_dim),
        adapter: 2 * d * b + b + d + 2 * d,
    }
}

fn check_preset(cfg: ModelConfig) {
    let k = closed_form(&cfg);
    let l = cfg.encoder.layers;
    let blocks = l * (k.layer_attn + k.layer_ffn + k.layer_norms);
    let encoder_core = k.pos_conv + k.final_norm + blocks;

    let warm = parameter_report(&planned_blueprint(cfg.clone(), StrategyKind::WarmStart, 2).unwrap(), TaskId(2)).unwrap();
    let warm_total = k.frontend + k.input_proj + k.mask + encoder_core + k.final_proj + k.quantizer;
    assert_eq!(warm.trainable, warm_total);
    assert_eq!(warm.total, warm_total);

    let mh = parameter_report(&planned_blueprint(cfg.clone(), StrategyKind::MultiHead, 2).unwrap(), TaskId(2)).unwrap();
    assert_eq!(mh.trainable, encoder_core + k.heads + k.quantizer);
    assert_eq!(mh.total, k.frontend + k.mask + encoder_core + 2 * (k.heads + k.quantizer));

    let ad = parameter_report(&planned_blueprint(cfg.clone(), StrategyKind::Adapters, 2).unwrap(), TaskId(2)).unwrap();
    assert_eq!(ad.trainable, l * (2 * k.adapter + k.layer_norms) + k.quantizer);
    assert_eq!(ad.total, warm_total + k.quantizer + l * (2 * k.adapter + k.layer_norms));

    for r in [&warm, &mh, &ad] {
        assert_eq!(r.trainable + r.frozen, r.total);
        let by_group: usize = r.groups.values().map(|g| g.trainable + g.frozen).sum();
        assert_eq!(by_group, r.total);
    }
    assert!(ad.trainable < mh.trainable && mh.trainable < warm.trainable);
}

#[test]
fn desk_counts_match_closed_form() {
    check_preset(ModelConfig::desk());
}

#[test]
fn full_counts_match_closed_form() {
    check_preset(ModelConfig::full());
}

#[test]
fn full_preset_landmarks() {
    let k = closed_form(&ModelConfig::full());
    assert_eq!(k.adapter, (768 * 512 + 512) + (512 * 768 + 768) + 2 * 768);
    assert_eq!(k.layer_attn, 4 * 768 * 768 + 4 * 768);
    // 512·1·10 + six more blocks of 512·512·K, plus norms.
    assert_eq!(k.frontend, 512 * 10 + 512 * 512 * (3 * 4 + 2 * 2) + 7 * 2 * 512);
}

#[test]
fn later_tasks_report_alike() {
    let bp = planned_blueprint(ModelConfig::desk(), StrategyKind::Adapters, 3).unwrap();
    let r2 = parameter_report(&bp, TaskId(2)).unwrap();
    let r3 = parameter_report(&bp, TaskId(3)).unwrap();
    assert_eq!(r2.trainable, r3.trainable);
    assert_eq!(r2.total, r3.total);
    assert!(parameter_report(&bp, TaskId(9)).is_err());
}
