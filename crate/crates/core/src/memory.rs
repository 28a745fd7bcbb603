//! Previous-session memory: a dedicated history projection, slot-based
//! retrieval with a gated residual update, a mean-pooled summary path, and
//! train-time history dropout.
//!
//! The memory consumes only the previous session's client-turn embeddings —
//! never its features or labels. Refinement order is fixed: retrieval
//! update first, then the summary update, then the prediction head.

use crate::config::{MemoryMode, ModelConfig};
use crate::model::{Fwd, MhaLayout, Model};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::BufId;

#[derive(Debug, Clone, Copy)]
pub struct RetrievalLayout {
    /// Learned slot queries, S×d.
    pub slots: ParamId,
    pub slot_attn: MhaLayout,
    pub slot_ln_gamma: ParamId,
    pub slot_ln_beta: ParamId,
    pub retrieve_attn: MhaLayout,
    /// Gate on [D; C], 2d -> d.
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    /// Candidate map W_o, d -> d (no bias).
    pub cand_w: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryLayout {
    /// Dedicated history projection d_e -> d (affine, no norm).
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub retrieval: Option<RetrievalLayout>,
    /// Affine map applied to the mean-pooled history vector.
    pub summary_w: ParamId,
    pub summary_b: ParamId,
    /// Gate on [D; v̄], 2d -> d.
    pub sgate_w: ParamId,
    pub sgate_b: ParamId,
}

impl MemoryLayout {
    pub fn build(store: &mut ParamStore, init: &Init, config: &ModelConfig) -> Self {
        let d = config.d;
        let retrieval = (config.memory_mode == MemoryMode::SummaryRetrieval).then(|| {
            RetrievalLayout {
                slots: store.add(
                    "memory.slots",
                    init.embedding("memory.slots", config.memory_slots, d),
                ),
                slot_attn: MhaLayout::build(store, init, "memory.slot_attn", d),
                slot_ln_gamma: store.add("memory.slot_ln.gamma", init.ones_vec(d)),
                slot_ln_beta: store.add("memory.slot_ln.beta", init.zeros_vec(d)),
                retrieve_attn: MhaLayout::build(store, init, "memory.retrieve_attn", d),
                gate_w: store
                    .add("memory.gate.w", init.glorot("memory.gate.w", 2 * d, d)),
                gate_b: store.add("memory.gate.b", init.zeros_vec(d)),
                cand_w: store.add("memory.cand.w", init.glorot("memory.cand.w", d, d)),
            }
        });
        MemoryLayout {
            proj_w: store.add("memory.proj.w", init.glorot("memory.proj.w", config.d_e, d)),
            proj_b: store.add("memory.proj.b", init.zeros_vec(d)),
            retrieval,
            summary_w: store.add("memory.summary.w", init.glorot("memory.summary.w", d, d)),
            summary_b: store.add("memory.summary.b", init.zeros_vec(d)),
            sgate_w: store.add("memory.sgate.w", init.glorot("memory.sgate.w", 2 * d, d)),
            sgate_b: store.add("memory.sgate.b", init.zeros_vec(d)),
        }
    }

    /// Row-wise affine map of raw previous-session turn embeddings into
    /// model space.
    pub fn project_history(&self, fwd: &mut Fwd, prev_turns: &[Vec<f64>], d_e: usize) -> BufId {
        let m = prev_turns.len();
        assert!(m >= 1, "history projection requires at least one turn");
        let mut flat = Vec::with_capacity(m * d_e);
        for t in prev_turns {
            assert_eq!(t.len(), d_e, "history embedding width mismatch");
            flat.extend_from_slice(t);
        }
        let u = fwd.tape.leaf_from(flat, vec![m, d_e]);
        let w = fwd.p(self.proj_w);
        let b = fwd.p(self.proj_b);
        let v = fwd.tape.matmul(u, w);
        fwd.tape.add_row(v, b)
    }

    /// Compress projected history into S slot rows: LN(MHA(P, V, V)).
    pub fn build_slot_memory(
        &self,
        retrieval: &RetrievalLayout,
        fwd: &mut Fwd,
        v: BufId,
        prev_valid: &[bool],
    ) -> BufId {
        let slots = fwd.p(retrieval.slots);
        let attended =
            fwd.mha(&retrieval.slot_attn, slots, v, prev_valid, "drop/mem/slot_probs");
        let gamma = fwd.p(retrieval.slot_ln_gamma);
        let beta = fwd.p(retrieval.slot_ln_beta);
        fwd.tape.layer_norm(attended, gamma, beta, crate::model::LN_EPS)
    }

    /// Gated residual injection of retrieved memory:
    /// D + σ(W_g[D; C] + b) ⊙ W_o C.
    pub fn retrieve_and_gate(
        &self,
        retrieval: &RetrievalLayout,
        fwd: &mut Fwd,
        d: BufId,
        mem: BufId,
    ) -> BufId {
        let s = fwd.tape.shape(mem)[0];
        let c = fwd.mha(&retrieval.retrieve_attn, d, mem, &vec![true; s], "drop/mem/retr_probs");
        let cat = fwd.tape.concat_cols(d, c);
        let gw = fwd.p(retrieval.gate_w);
        let gb = fwd.p(retrieval.gate_b);
        let gate_logits = fwd.tape.matmul(cat, gw);
        let gate_logits = fwd.tape.add_row(gate_logits, gb);
        let gate = fwd.tape.sigmoid(gate_logits);
        let cw = fwd.p(retrieval.cand_w);
        let cand = fwd.tape.matmul(c, cw);
        let update = fwd.tape.mul(gate, cand);
        fwd.tape.add(d, update)
    }

    /// Gated residual injection of the mean-pooled summary:
    /// D + σ(W_g'[D; v̄] + b) ⊙ v̄, with v̄ the affinely mapped mean.
    pub fn summary_gate(
        &self,
        fwd: &mut Fwd,
        d: BufId,
        v: BufId,
        prev_valid: &[bool],
        n_symptoms: usize,
    ) -> BufId {
        let pooled = fwd.tape.mean_rows_masked(v, prev_valid.to_vec());
        let sw = fwd.p(self.summary_w);
        let sb = fwd.p(self.summary_b);
        let vbar = fwd.tape.matmul(pooled, sw);
        let vbar = fwd.tape.add_row(vbar, sb);
        let vrep = fwd.tape.repeat_row(vbar, n_symptoms);
        let cat = fwd.tape.concat_cols(d, vrep);
        let gw = fwd.p(self.sgate_w);
        let gb = fwd.p(self.sgate_b);
        let gate_logits = fwd.tape.matmul(cat, gw);
        let gate_logits = fwd.tape.add_row(gate_logits, gb);
        let gate = fwd.tape.sigmoid(gate_logits);
        let update = fwd.tape.mul(gate, vrep);
        fwd.tape.add(d, update)
    }

    /// Full refinement: retrieval update (when configured), then summary.
    pub fn refine(
        &self,
        model: &Model,
        fwd: &mut Fwd,
        mut d: BufId,
        prev_turns: &[Vec<f64>],
        prev_valid: &[bool],
    ) -> BufId {
        let v = self.project_history(fwd, prev_turns, model.config.d_e);
        if let Some(retrieval) = &self.retrieval {
            let mem = self.build_slot_memory(retrieval, fwd, v, prev_valid);
            d = self.retrieve_and_gate(retrieval, fwd, d, mem);
        }
        self.summary_gate(fwd, d, v, prev_valid, model.config.n_symptoms)
    }
}

/// Train-time history dropout: with history present, keep it with
/// probability 1 − p_hist; eval always keeps it.
pub fn history_gate(has_history: bool, p_hist: f64, train: bool, seed: u64, uid: u64) -> bool {
    assert!((0.0..=1.0).contains(&p_hist), "p_hist outside [0, 1]");
    if !has_history {
        return false;
    }
    if !train {
        return true;
    }
    StreamRng::new(seed, "history_gate").uniform(uid, 0) >= p_hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::Mode;
    use crate::rng::StreamRng;

    fn tiny_memory_model() -> Model {
        let mut cfg = ModelConfig::defaults(5);
        cfg.d = 8;
        cfg.heads = 2;
        cfg.d_ff = 16;
        cfg.l_enc = 1;
        cfg.l_dec = 1;
        cfg.n_features = 4;
        cfg.group_map = crate::config::default_group_map(4);
        cfg.memory_slots = 4;
        cfg.n_max = 6;
        cfg.score_mlp_hidden = 4;
        Model::new(cfg, 21)
    }

    fn rand_turns(seed: u64, m: usize, d_e: usize) -> Vec<Vec<f64>> {
        let r = StreamRng::new(seed, "mem_turns");
        (0..m).map(|t| (0..d_e).map(|i| r.normal(t as u64, i as u64)).collect()).collect()
    }

    #[test]
    fn project_history_single_row_and_zero_weights() {
        let mut model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let mut fwd = Fwd::new(&model, Mode::Eval);
        let v = mem.project_history(&mut fwd, &rand_turns(1, 1, 5), 5);
        assert_eq!(fwd.tape.shape(v), &[1, 8]);

        // Zero weights: every row equals the bias.
        for val in model.store.get_mut(mem.proj_w).data.iter_mut() {
            *val = 0.0;
        }
        {
            let b = model.store.get_mut(mem.proj_b);
            for (i, val) in b.data.iter_mut().enumerate() {
                *val = i as f64;
            }
        }
        let mem = model.memory.unwrap();
        let mut fwd = Fwd::new(&model, Mode::Eval);
        let v = mem.project_history(&mut fwd, &rand_turns(2, 3, 5), 5);
        let got = fwd.tape.value(v);
        for row in 0..3 {
            for c in 0..8 {
                assert_eq!(got[row * 8 + c], c as f64);
            }
        }
    }

    #[test]
    fn project_history_is_affine() {
        let model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let base = rand_turns(3, 1, 5);
        let a = 2.75;
        let scaled: Vec<Vec<f64>> = base.iter().map(|r| r.iter().map(|x| a * x).collect()).collect();
        let zero = vec![vec![0.0; 5]];

        let run = |turns: &[Vec<f64>]| -> Vec<f64> {
            let mut fwd = Fwd::new(&model, Mode::Eval);
            let v = mem.project_history(&mut fwd, turns, 5);
            fwd.tape.value(v).to_vec()
        };
        let p_base = run(&base);
        let p_scaled = run(&scaled);
        let p_zero = run(&zero);
        // project(a·u) − project(0) = a · (project(u) − project(0))
        for c in 0..8 {
            let lhs = p_scaled[c] - p_zero[c];
            let rhs = a * (p_base[c] - p_zero[c]);
            assert!((lhs - rhs).abs() < 1e-10, "col {c}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn slot_memory_fixed_size_and_single_row_closed_form() {
        let model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let retrieval = mem.retrieval.unwrap();
        let d = 8;

        let mut fwd = Fwd::new(&model, Mode::Eval);
        let v = mem.project_history(&mut fwd, &rand_turns(4, 7, 5), 5);
        let slots = mem.build_slot_memory(&retrieval, &mut fwd, v, &[true; 7]);
        assert_eq!(fwd.tape.shape(slots), &[4, 8]);

        // Single history row: every slot equals LN(out-proj of its value row).
        let mut fwd = Fwd::new(&model, Mode::Eval);
        let v = mem.project_history(&mut fwd, &rand_turns(5, 1, 5), 5);
        let vrow = fwd.tape.value(v).to_vec();
        let slots = mem.build_slot_memory(&retrieval, &mut fwd, v, &[true]);
        let got = fwd.tape.value(slots).to_vec();

        let store = &model.store;
        let mut val = vec![0.0; d];
        crate::tensor::matmul_acc(&vrow, &store.get(retrieval.slot_attn.wv).data, 1, d, d, &mut val);
        for c in 0..d {
            val[c] += store.get(retrieval.slot_attn.bv).data[c];
        }
        let mut out = vec![0.0; d];
        crate::tensor::matmul_acc(&val, &store.get(retrieval.slot_attn.wo).data, 1, d, d, &mut out);
        for c in 0..d {
            out[c] += store.get(retrieval.slot_attn.bo).data[c];
        }
        let expect = crate::tensor::layer_norm(
            &out,
            &store.get(retrieval.slot_ln_gamma).data,
            &store.get(retrieval.slot_ln_beta).data,
            crate::model::LN_EPS,
        );
        for s in 0..4 {
            for c in 0..d {
                assert!(
                    (got[s * d + c] - expect[c]).abs() < 1e-12,
                    "slot {s} col {c}: {} vs {}",
                    got[s * d + c],
                    expect[c]
                );
            }
        }
    }

    #[test]
    fn slot_memory_key_permutation_invariant() {
        let model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let retrieval = mem.retrieval.unwrap();
        let turns = rand_turns(6, 5, 5);
        let mut permuted = turns.clone();
        permuted.swap(0, 3);
        permuted.swap(1, 4);

        let run = |t: &[Vec<f64>]| -> Vec<f64> {
            let mut fwd = Fwd::new(&model, Mode::Eval);
            let v = mem.project_history(&mut fwd, t, 5);
            let slots = mem.build_slot_memory(&retrieval, &mut fwd, v, &[true; 5]);
            fwd.tape.value(slots).to_vec()
        };
        let a = run(&turns);
        let b = run(&permuted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_gate_leaves_symptom_states_unchanged() {
        let mut model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let retrieval = mem.retrieval.unwrap();
        // Huge negative gate biases close both gates exactly.
        for id in [retrieval.gate_b, mem.sgate_b] {
            for v in model.store.get_mut(id).data.iter_mut() {
                *v = -1e9;
            }
        }
        for id in [retrieval.gate_w, mem.sgate_w] {
            for v in model.store.get_mut(id).data.iter_mut() {
                *v = 0.0;
            }
        }
        let mem = model.memory.unwrap();
        let mut fwd = Fwd::new(&model, Mode::Eval);
        let d0 = fwd.tape.leaf_from((0..64).map(|i| i as f64 * 0.1).collect(), vec![8, 8]);
        let before = fwd.tape.value(d0).to_vec();
        let out = mem.refine(&model, &mut fwd, d0, &rand_turns(7, 4, 5), &[true; 4]);
        assert_eq!(fwd.tape.value(out), before.as_slice());
    }

    #[test]
    fn open_gate_identity_candidate_adds_retrieved_rows() {
        let mut model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let retrieval = mem.retrieval.unwrap();
        // Open retrieval gate exactly; identity candidate map.
        for v in model.store.get_mut(retrieval.gate_w).data.iter_mut() {
            *v = 0.0;
        }
        for v in model.store.get_mut(retrieval.gate_b).data.iter_mut() {
            *v = 1e9;
        }
        {
            let cw = model.store.get_mut(retrieval.cand_w);
            for v in cw.data.iter_mut() {
                *v = 0.0;
            }
            for i in 0..8 {
                cw.data[i * 8 + i] = 1.0;
            }
        }
        let mem = model.memory.unwrap();
        let retrieval = mem.retrieval.unwrap();
        let mut fwd = Fwd::new(&model, Mode::Eval);
        let v = mem.project_history(&mut fwd, &rand_turns(8, 4, 5), 5);
        let m = mem.build_slot_memory(&retrieval, &mut fwd, v, &[true; 4]);
        let d0 = fwd.tape.leaf_from((0..64).map(|i| (i as f64).sin()).collect(), vec![8, 8]);
        let d_before = fwd.tape.value(d0).to_vec();

        // Reproduce C with the same attention call, then expect D + C.
        let out = mem.retrieve_and_gate(&retrieval, &mut fwd, d0, m);
        let got = fwd.tape.value(out).to_vec();
        let c = fwd.mha(&retrieval.retrieve_attn, d0, m, &[true; 4], "unused");
        let c_vals = fwd.tape.value(c).to_vec();
        for i in 0..64 {
            assert!(
                (got[i] - (d_before[i] + c_vals[i])).abs() < 1e-12,
                "elem {i}: {} vs {}",
                got[i],
                d_before[i] + c_vals[i]
            );
        }
    }

    #[test]
    fn summary_single_row_is_mapped_row_and_duplication_invariant() {
        let model = tiny_memory_model();
        let mem = model.memory.unwrap();
        let turns = rand_turns(9, 3, 5);
        let mut doubled = turns.clone();
        doubled.extend(turns.iter().cloned());

        let run = |t: &[Vec<f64>]| -> Vec<f64> {
            let mut fwd = Fwd::new(&model, Mode::Eval);
            let v = mem.project_history(&mut fwd, t, 5);
            let d0 = fwd.tape.leaf_from(vec![0.2; 64], vec![8, 8]);
            let out = mem.summary_gate(&mut fwd, d0, v, &vec![true; t.len()], 8);
            fwd.tape.value(out).to_vec()
        };
        let a = run(&turns);
        let b = run(&doubled);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12, "duplicating rows changed the summary");
        }
    }

    #[test]
    fn history_gate_semantics() {
        assert!(!history_gate(false, 0.0, true, 1, 1));
        assert!(!history_gate(false, 0.0, false, 1, 1));
        // p_hist = 0: always kept in training.
        for uid in 0..50 {
            assert!(history_gate(true, 0.0, true, 1, uid));
        }
        // p_hist = 1: always dropped in training.
        for uid in 0..50 {
            assert!(!history_gate(true, 1.0, true, 1, uid));
        }
        // Eval keeps history regardless of p_hist.
        assert!(history_gate(true, 1.0, false, 1, 0));
    }

    #[test]
    fn history_gate_drop_frequency() {
        let drops = (0..10_000).filter(|&uid| !history_gate(true, 0.1, true, 7, uid)).count();
        let rate = drops as f64 / 10_000.0;
        assert!((rate - 0.1).abs() < 0.02, "drop rate {rate}");
    }
}
