//! Tabular soft-RL on token trees, preference-weighted policy soups,
//! online weight adaptation and the bound checks that go with them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod langmdp;
pub mod math;
pub mod offline;
pub mod preference;
pub mod softrl;
pub mod spectral;
pub mod souping;

pub use error::{Result, SoupError};
pub use langmdp::{
    FeatureMap, FeatureSpec, LanguageMdp, MdpSpec, PolicyTable, RefPolicySpec, ReferencePolicy, State, Token, Vocab,
};
pub use adapt::{deployed_weights, solve_eq6, svi_stream, svi_update, Eq6Config, FeedbackEvent, VariationalPosterior};
pub use bounds::{certify, certify_random, lemma1_fit, BoundReport, CertInstance};
pub use harness::{emit_report, run_scenario, RunReport, ScenarioConfig};
pub use offline::{train_specialized, LogitAdapter, TrainConfig};
pub use preference::{AttributeSet, PreferencePair, PreferenceVector};
pub use softrl::{evaluate_policy, solve_soft, RewardFn, SoftSolution};
pub use souping::{soup_table, SoupWeights, Specialists};
pub use spectral::{em_fit, EmConfig, EmFit, PsiModel};
