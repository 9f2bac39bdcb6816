"""Discrete-diffusion sequence generation at desk scale.

Per-position noise schedules unify autoregressive and diffusion decoding;
hybrid absorb/uniform noising lets trained denoisers revise earlier tokens;
windowed attention layouts make settled prefixes cacheable.  Everything is
plain numpy with hand-written gradients, sized to be verifiable against
analytic oracles on synthetic corpora.
"""

from .rng import RngStream
from .corpus import (Vocab, MarkovSource, NgramJudge, make_markov_source,
                     sample_corpus, ngram_fit, save_corpus, load_corpus,
                     save_markov_source, load_markov_source)
from .hyperschedule import (Hyperschedule, Partition, build, window_width,
                            generation_rate, partition_at)
from .process import (CumulativeNoiseSchedule, AlphaSchedule, Generator,
                      EvolutionOperator, EpsilonProcess, GammaProcess,
                      loglinear_sigma, linear_alpha, generator,
                      evolve_analytic, epsilon_step_kernel,
                      corrupt_gamma, corrupt_epsilon,
                      corrupt_gamma_at_levels, corrupt_epsilon_at_levels,
                      FLAG_UNCHANGED, FLAG_SHUFFLED, FLAG_MASKED)
from .masks import (AttentionMask, KvCost, inference_mask, training_mask,
                    kv_cost, fill_tokens, fill_levels, mask_to_pbm, mask_to_csv)
from .denoiser import (DenoiserConfig, init_params, forward, backward,
                       loss_and_grads, sgd_step, save_checkpoint,
                       load_checkpoint, KvCache, kv_block)
from .loss import (LossSpec, LossResult, hdce_weights, gamma_weights,
                   hdce_loss, settled_ce, position_reweight, combined_loss)
from .sampler import (SamplerRun, CallLedger, transfer_prob, step_original,
                      step_acs, generate, windowed_call_grid,
                      gumbel_from_uniform)
from .evaluate import PplEstimate, mc_ppl, gen_ppl, token_entropy
from .workflows import (RunConfig, ConfigError, NumericalError, Manifest,
                        parse_config_text, load_config, gen_corpus,
                        train_model, draw_samples, run_pipeline)

__version__ = "0.1.0"
