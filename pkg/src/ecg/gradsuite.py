"""End-to-end gradient verification of every training objective.

Each check differentiates a full loss (through the encoder, the projection
blocks, and the mixed-input generator where applicable) on micro shapes
(batch 2, 2 embedding tokens, hidden size 8) against central finite
differences over every parameter coordinate.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .losses import infonce, kl_distill, lm_loss, margin_mse, pair_similarity
from .model import EcgModel, LmConfig, PROMPT_TEXTS, reader_prompt
from .projections import comp_project, ret_project
from .tensor import Tensor
from .vocab import Vocabulary

_TEXTS = ["ga zu mo ra", "zu mo ra ne", "mo ra ne ga"]
_QUESTION = "ga zu"
_ANSWER = "mo ra"


def _micro_model(seed: int = 0) -> EcgModel:
    vocab = Vocabulary.build(_TEXTS + [_QUESTION, _ANSWER] + PROMPT_TEXTS)
    cfg = LmConfig(vocab_size=len(vocab), layers=1, heads=2, d=8, max_len=48, t=2)
    return EcgModel.new(cfg, vocab, seed=seed)


def _spread_params(model: EcgModel, rng: np.random.Generator) -> None:
    """Perturb away from init so gates and branches are all active."""
    for name, p in model.params.items():
        if name.startswith(("ret.", "comp.")) and name.endswith(("w_gate", "w_proj")):
            p.data += rng.normal(0.0, 0.15, size=p.shape)
        if name.endswith("b_gate"):
            p.data[:] = 1.0


def run_suite(step: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    results: list[tuple[str, GradCheckReport]] = []
    rng = np.random.default_rng(2024)

    model = _micro_model()
    _spread_params(model, rng)
    params = model.params
    t = model.cfg.t

    # Both projection blocks, composed, against their own parameters.
    proj_params = {k: v for k, v in params.items() if k.startswith(("ret.", "comp."))}
    h_in = Tensor(rng.normal(size=(3, model.cfg.d)), requires_grad=True)
    proj_checked = dict(proj_params)
    proj_checked["input"] = h_in

    def f_proj():
        out = comp_project(ret_project(h_in, params), params)
        return T.tsum(T.mul(out, out))

    results.append(("projection_blocks", grad_check(f_proj, proj_checked, step, tol)))

    def f_ssl_lm():
        total = None
        for ctx, tgt in [(_TEXTS[0], _TEXTS[1]), (_TEXTS[1], _TEXTS[2])]:
            comp = comp_project(ret_project(model.encode_hidden(ctx, t), params), params)
            term = lm_loss(model, model.vocab.encode(tgt), comp)
            total = term if total is None else T.add(total, term)
        return T.mul(total, 0.5)

    results.append(("ssl_lm_loss", grad_check(f_ssl_lm, params, step, tol)))

    def f_ssl_contrastive():
        rets = [ret_project(model.encode_hidden(text, t), params) for text in _TEXTS[:2]]
        rows = [[pair_similarity(rc, rt) for rt in rets] for rc in rets]
        sims = T.concat_rows([T.reshape(T.stack_scalars(r), (1, 2)) for r in rows])
        return infonce(sims, T.exp(params["scale.log_tau"]))

    results.append(("ssl_infonce_with_tau", grad_check(f_ssl_contrastive, params, step, tol)))

    teacher = _micro_model(seed=7)
    teacher_prompt = reader_prompt(_QUESTION, [_TEXTS[0]])
    answer_ids = model.vocab.encode(_ANSWER)
    with T.no_grad():
        from .model import MixedInput

        t_in = MixedInput()
        t_in.append_tokens(teacher.vocab.encode(teacher_prompt) + answer_ids)
        _, t_logits = teacher.forward(t_in)
    n_labels = len(answer_ids) + 1
    teacher_rows = t_logits.data[len(t_in) - n_labels : len(t_in)]

    def f_rag_kl():
        comp = comp_project(ret_project(model.encode_hidden(_TEXTS[0], t), params), params)
        student_in = model.build_gen_input(_QUESTION, [comp], answer_prefix=_ANSWER)
        _, logits = model.forward(student_in)
        rows = np.arange(len(student_in) - n_labels, len(student_in))
        return kl_distill(T.gather_rows(logits, rows), teacher_rows)

    results.append(("rag_kl_distill", grad_check(f_rag_kl, params, step, tol)))

    def f_rag_infonce():
        q = ret_project(model.encode_hidden(_QUESTION, t), params)
        docs = [ret_project(model.encode_hidden(text, t), params) for text in _TEXTS]
        row = T.reshape(T.stack_scalars([pair_similarity(q, d) for d in docs]), (1, 3))
        return infonce(row, T.exp(params["scale.log_tau"]))

    results.append(("rag_infonce_with_tau", grad_check(f_rag_infonce, params, step, tol)))

    def f_rag_margin():
        q = ret_project(model.encode_hidden(_QUESTION, t), params)
        docs = [ret_project(model.encode_hidden(text, t), params) for text in _TEXTS]
        scores = T.stack_scalars([pair_similarity(q, d) for d in docs])
        return margin_mse(scores, np.array([2.0, 0.8, 0.4]), 0, [1, 2], params["scale.alpha"])

    results.append(("rag_margin_mse_with_alpha", grad_check(f_rag_margin, params, step, tol)))

    return results


def format_suite_results(results: list[tuple[str, GradCheckReport]]) -> list[str]:
    lines = []
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        extra = f" flagged={len(report.flagged)}" if report.flagged else ""
        lines.append(f"{status} {name}: max_rel_err={report.max_rel_err:.3e} tol={report.tol:g}{extra}")
    return lines
