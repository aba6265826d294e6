//! Grammar-masked greedy and beam decoding.

use std::cmp::Ordering;

use sheetcoder_core::formula::{FormulaIR, Stage, StreamAutomaton};

use crate::config::Decoding;
use crate::features::{Head, OutputSpace};
use crate::net::{DecoderCache, Network, StepState};
use crate::ModelError;
use sheetcoder_autodiff::ParamStore;

/// A finished decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    pub logp: f64,
}

impl Hypothesis {
    pub fn ir(&self) -> Result<FormulaIR, ModelError> {
        FormulaIR::from_tokens(&self.tokens).map_err(|e| ModelError::Data(e.to_string()))
    }
}

/// Final ranking: higher log-prob, then shorter stream, then token order.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.logp.total_cmp(&a.logp).then(a.tokens.len().cmp(&b.tokens.len())).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone)]
struct Live {
    tokens: Vec<String>,
    automaton: StreamAutomaton,
    logp: f64,
    input: usize,
    state: (Vec<f64>, Vec<f64>),
}

pub struct Decoder<'a> {
    pub net: &'a Network,
    pub store: &'a ParamStore,
    pub out: &'a OutputSpace,
}

/// Step budget that any grammar-valid stream fits in.
fn max_steps(net: &Network) -> usize {
    let c = net.config();
    c.max_sketch_len + 1 + 7 * c.max_ranges + 1
}

impl Decoder<'_> {
    /// Allowed `(head, id, logp)` continuations of one hypothesis.
    fn continuations(&self, live: &Live, sketch: &[f64], range: &[f64]) -> Vec<(Head, usize, f64)> {
        let single = self.net.config().decoding == Decoding::SingleStage;
        let mut out = Vec::new();
        match live.automaton.stage() {
            Stage::Sketch => {
                for (id, tok) in self.out.sketch.iter().enumerate() {
                    if let Some(tok) = tok {
                        if live.automaton.allows_sketch(tok) {
                            let lp = if single { sketch[self.out.joint(Head::Sketch, id)] } else { sketch[id] };
                            out.push((Head::Sketch, id, lp));
                        }
                    }
                }
            }
            Stage::Ranges => {
                for (id, tok) in self.out.range.iter().enumerate() {
                    if live.automaton.allows_range(*tok) {
                        let lp = if single { sketch[self.out.joint(Head::Range, id)] } else { range[id] };
                        out.push((Head::Range, id, lp));
                    }
                }
            }
            Stage::Finished => {}
        }
        out
    }

    fn advance(&self, live: &Live, head: Head, id: usize, lp: f64, state: (Vec<f64>, Vec<f64>)) -> Live {
        let mut next = live.clone();
        match head {
            Head::Sketch => next.automaton.push_sketch(self.out.sketch[id].as_ref().expect("allowed tokens parse")),
            Head::Range => next.automaton.push_range(self.out.range[id]),
        }
        .expect("only allowed tokens are pushed");
        next.tokens.push(self.out.text(head, id));
        next.logp += lp;
        next.input = self.out.decoder_input(head, id);
        next.state = state;
        next
    }

    fn start(&self) -> Live {
        let hd = self.net.config().dec_hidden;
        Live {
            tokens: Vec::new(),
            automaton: StreamAutomaton::new(self.net.config().limits()),
            logp: 0.0,
            input: OutputSpace::GO,
            state: (vec![0.0; hd], vec![0.0; hd]),
        }
    }

    /// Highest-probability allowed token at every step; ties go to the lower id.
    pub fn greedy(&self, cache: &DecoderCache) -> Result<Option<Hypothesis>, ModelError> {
        let hd = self.net.config().dec_hidden;
        let mut live = self.start();
        for _ in 0..max_steps(self.net) {
            let state = StepState::stack(std::slice::from_ref(&live.state), hd);
            let step = self.net.step(self.store, cache, &[live.input], &state)?;
            let range = step.range_logp.first().map(Vec::as_slice).unwrap_or(&[]);
            let cands = self.continuations(&live, &step.sketch_logp[0], range);
            let best = cands.into_iter().fold(None::<(Head, usize, f64)>, |best, c| match best {
                Some(b) if b.2 >= c.2 => Some(b),
                _ => Some(c),
            });
            let Some((head, id, lp)) = best else { return Ok(None) };
            live = self.advance(&live, head, id, lp, step.state.row(0));
            if live.automaton.is_finished() {
                return Ok(Some(Hypothesis { tokens: live.tokens, logp: live.logp }));
            }
        }
        Ok(None)
    }

    /// Length-bounded beam search. Returns up to `beam` finished hypotheses in rank order;
    /// empty when none finishes within the step budget.
    pub fn beam(&self, cache: &DecoderCache, beam: usize) -> Result<Vec<Hypothesis>, ModelError> {
        if beam == 0 {
            return Err(ModelError::Config("beam size must be at least 1".into()));
        }
        let hd = self.net.config().dec_hidden;
        let mut active = vec![self.start()];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..max_steps(self.net) {
            if active.is_empty() {
                break;
            }
            let states: Vec<(Vec<f64>, Vec<f64>)> = active.iter().map(|l| l.state.clone()).collect();
            let inputs: Vec<usize> = active.iter().map(|l| l.input).collect();
            let step = self.net.step(self.store, cache, &inputs, &StepState::stack(&states, hd))?;
            let mut cands: Vec<(f64, usize, Head, usize, f64)> = Vec::new();
            for (i, live) in active.iter().enumerate() {
                let range = step.range_logp.get(i).map(Vec::as_slice).unwrap_or(&[]);
                for (head, id, lp) in self.continuations(live, &step.sketch_logp[i], range) {
                    cands.push((live.logp + lp, i, head, id, lp));
                }
            }
            // Score descending, then hypothesis index, then output index.
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then((a.2 == Head::Range).cmp(&(b.2 == Head::Range))).then(a.3.cmp(&b.3))
            });
            let mut next = Vec::with_capacity(beam);
            for (_, i, head, id, lp) in cands.into_iter().take(beam) {
                let live = self.advance(&active[i], head, id, lp, step.state.row(i));
                if live.automaton.is_finished() {
                    finished.push(Hypothesis { tokens: live.tokens, logp: live.logp });
                } else {
                    next.push(live);
                }
            }
            active = next;
            finished.sort_by(rank_order);
            finished.truncate(beam);
            // Scores only fall as hypotheses grow, so a full finished list that beats
            // every active hypothesis is final.
            if finished.len() == beam {
                let worst = finished.last().expect("non-empty").logp;
                let best_active = active.iter().map(|l| l.logp).fold(f64::NEG_INFINITY, f64::max);
                if worst >= best_active {
                    break;
                }
            }
        }
        finished.sort_by(rank_order);
        finished.truncate(beam);
        Ok(finished)
    }
}
