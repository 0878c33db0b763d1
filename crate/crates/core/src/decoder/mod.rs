//! Toy decoder-only transformer with a hook on every head output, planted
//! drift for synthetic data, and attention-shift probes.

mod model;
pub mod shift;
pub mod synth;

pub use model::{
    decode_forced, decode_greedy, init_decoder, DecodeOptions, DecodeResult, DecoderConfig, HeadRecording, Token,
    ToyDecoder,
};
pub use shift::{attention_shift, default_shift_layer, write_shift_csv, AttentionShift, DEFAULT_SHIFT_EPS};
pub use synth::{
    generate_synthetic_dataset, synthetic_label, synthetic_prompts, trace_noise_seed, DriftSchedule, DriftSpec,
    Perturbation, PlantedDirection, SynthConfig, SyntheticProblem, DEFAULT_GAMMA,
};
