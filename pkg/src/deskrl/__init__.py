"""deskrl: a desk-scale asynchronous RL post-training stack.

The package is organized one module per concern:

* ``core``       shared domain types (rollouts, groups, cost features)
* ``reward``     length penalty, composite reward, group-relative advantages
* ``klmath``     KL estimators over log-ratios and the Gaussian study
* ``toylm``      tiny mixture-of-experts policy with router replay
* ``quant``      MXFP8 / NVFP4 block-scaled quantization, bit-exact
* ``sched``      zigzag context-parallel assignment and LPT packing
* ``sync``       delta-compressed weight publishing over a blob store
* ``reconciler`` slot lifecycle, staleness policy, group checkpointing
* ``envsim``     node/pod fleet simulator and the key-chain task env
* ``detector``   streaming-bug prefix-chain detector
* ``runner``     the experiment loop (run_rl, best_of_k, emit_report)
* ``cli``        the ``deskrl`` console entry point
"""

__version__ = "0.1.0"
