import itertools
import random
from datetime import timedelta

import pytest

from reasonbench.functional.backend import ScriptedBackend, ScriptEntry, ScriptMode, UsageSource, load_scripted_backend
from reasonbench.functional.errors import (
    BackendTransportError, ConfigError, ContractViolation, DegeneratePlanError, WorkflowFailure
)
from reasonbench.functional.workflows import (
    AggregatorMode, Domain, Message, MessageKind, Paradigm, TaskInstance, Transcript, TranscriptStatus, UnitTestSuite,
    aggregate_majority, expected_calls, extract_final, normalize_answer, run_adversarial_debate,
    run_interactive_debate, run_plan_execute, run_reflection, run_single_model, run_workflow, sync_peers,
    transcript_cost
)
from reasonbench.tests import SCRIPTS_PATH, JitteredBackend, TestBaseClass, assert_raises, make_task, scripted


def _message(index, role, tokens, source=UsageSource.BACKEND_REPORTED):
    return Message(index_k=index, agent_id=role, role_name=role, round_r=0, kind=MessageKind.FINAL,
                   content=f'message {index}', token_count=tokens, usage_source=source)


class TestTaskInstance(TestBaseClass):

    def test_code_task_needs_suite(self):
        """
        A code task without a unit-test suite is rejected.
        """
        assert_raises(ValueError, TaskInstance, id='c', domain=Domain.CODE, input_x='x', ground_truth='42')
        assert_raises(ValueError, TaskInstance, id='m', domain=Domain.MATH, input_x='x',
                      ground_truth=UnitTestSuite(tests=('assert True',)))

    def test_from_record(self):
        """
        Dataset records map onto tasks.
        """
        task = TaskInstance.from_record({'id': 7, 'domain': 'code', 'input': 'Write f.',
                                         'test_suite': {'tests': ['assert f() == 1']}}, 'humaneval')
        self.eq(task.id, '7')
        self.eq(task.ground_truth.tests, ('assert f() == 1',))
        self.eq(task.source_dataset, 'humaneval')


class TestWorkflowConfig(TestBaseClass):

    def test_debate_needs_two_debaters(self):
        """
        Interactive debate with a single debater is a contract violation.
        """
        assert_raises(ContractViolation, self.workflow, Paradigm.INTERACTIVE_DEBATE, n_debaters=1)

    def test_negative_rounds(self):
        """
        Round counts cannot be negative.
        """
        assert_raises(ContractViolation, self.workflow, Paradigm.ADVERSARIAL_DEBATE, rounds=-1)

    def test_template_override_must_keep_fields(self):
        """
        A template override that drops the plan from the executor prompt is a config error.
        """
        e = assert_raises(ConfigError, self.workflow, Paradigm.PLAN_EXECUTE, templates={'execute': 'Solve {input}.'})
        assert 'plan' in str(e), str(e)
        self.eq(e.field, 'workflows.plan_execute.template.execute')

    def test_unknown_template_stage(self):
        """
        Overrides can only target known stages.
        """
        assert_raises(ConfigError, self.workflow, Paradigm.REFLECTION, templates={'rethink': '{input}'})

    def test_decoding_per_paradigm(self):
        """
        single_direct forces direct response and single_cot forces adaptive reasoning.
        """
        self.eq(self.workflow(Paradigm.SINGLE_DIRECT, strategy='adaptive_reasoning').decoding_for('solver').adaptive,
                False)
        self.eq(self.workflow(Paradigm.SINGLE_COT).decoding_for('solver').adaptive, True)

    def test_snapshot_names_every_role(self):
        """
        The snapshot carries the resolved prompts and decoding of every role.
        """
        snapshot = self.workflow(Paradigm.ADVERSARIAL_DEBATE, rounds=2).snapshot()
        self.eq(sorted(snapshot['role_prompts']), ['affirmative', 'judge', 'negative'])
        self.eq(snapshot['rounds'], 2)
        self.eq(snapshot['decoding']['judge']['strategy'], 'direct_response')


class TestAnswerHandling(TestBaseClass):

    def test_extract_final(self):
        """
        The last marker wins and only its first line is kept.
        """
        self.eq(extract_final('FINAL: 3\nthen FINAL: 4\nextra'), '4')
        self.eq(extract_final('no marker here'), None)
        self.eq(extract_final('final: b'), 'b')

    def test_normalize_answer(self):
        """
        Normalization strips the marker, folds case and collapses whitespace.
        """
        self.eq(normalize_answer('Reasoning...\nFINAL:   The  Answer'), 'the answer')
        self.eq(normalize_answer('  B '), 'b')

    def test_aggregation_oracle(self):
        """
        Every multiset of up to five answers over three labels: the winner has the maximum
        count and ties are flagged exactly when the maximum is shared.
        """
        for size in range(1, 6):
            for multiset in itertools.combinations_with_replacement('ABC', size):
                for order in set(itertools.permutations(multiset)):
                    candidates = [f'FINAL: {a}' for a in order]
                    answer, tie = aggregate_majority(candidates)
                    counts = {a: order.count(a) for a in set(order)}
                    top = max(counts.values())
                    self.eq(counts[answer.upper()], top)
                    self.eq(tie, sum(1 for c in counts.values() if c == top) > 1)
                    if tie:
                        first = next(a for a in order if counts[a] == top)
                        self.eq(answer, first.lower())

    def test_aggregate_empty(self):
        """
        Aggregating nothing is an error.
        """
        assert_raises(ValueError, aggregate_majority, [])

    def test_sync_peers(self):
        """
        Peer answers are listed in agent order, one line each.
        """
        self.eq(sync_peers([(3, 'C'), (1, 'A')]), 'Agent 1 answered: A\nAgent 3 answered: C')
        self.eq(sync_peers([(2, 'FINAL: 4')]), 'Agent 2 answered: FINAL: 4')
        assert_raises(ValueError, sync_peers, [])


class TestSingleModel(TestBaseClass):

    def test_direct_has_one_message(self):
        """
        Direct response yields exactly one final message without reasoning.
        """
        backend = load_scripted_backend(SCRIPTS_PATH / 'model_a.jsonl')
        transcript = run_single_model(make_task(), self.workflow(Paradigm.SINGLE_DIRECT), backend)
        self.eq(self.kinds(transcript), ['final'])
        self.eq(transcript.final_answer_y, 'The total is 72.\nFINAL: 72')
        self.eq(transcript.total_cost_C, 30)
        self.eq(transcript.status, TranscriptStatus.COMPLETE)

    def test_cot_records_reasoning(self):
        """
        Adaptive reasoning records the reasoning segment before the final answer.
        """
        backend = load_scripted_backend(SCRIPTS_PATH / 'model_a.jsonl')
        transcript = run_single_model(make_task(), self.workflow(Paradigm.SINGLE_COT), backend)
        self.eq(self.kinds(transcript), ['reasoning', 'final'])
        self.eq([m.token_count for m in transcript.messages], [18, 12])
        self.eq(transcript.total_cost_C, 30)
        self.eq(transcript.messages[-1].content, transcript.final_answer_y)
        assert '<think>' not in transcript.final_answer_y

    def test_wrong_paradigm(self):
        """
        A runner refuses a config of another paradigm.
        """
        assert_raises(ContractViolation, run_single_model, make_task(), self.workflow(Paradigm.REFLECTION),
                      scripted({'*': 'x'}))

    def test_backend_failure_keeps_partial_transcript(self):
        """
        A failing call aborts the workflow and carries a failed transcript.
        """
        backend = ScriptedBackend('down', [ScriptEntry(reply='', key='*', fail=True)])
        e = assert_raises(WorkflowFailure, run_single_model, make_task(), self.workflow(Paradigm.SINGLE_DIRECT),
                          backend)
        self.eq(e.transcript.status, TranscriptStatus.FAILED)
        self.eq(e.stage, 'solver/solve')
        assert e.transcript.failure.startswith('solver/solve')


class TestPlanExecute(TestBaseClass):

    def test_plan_then_execute(self):
        """
        The executor sees the plan verbatim and produces the final answer.
        """
        planner = scripted({'planner/plan': '1. Add 48 and 24.\n2. Report the sum.'})
        executor = scripted({'executor/execute': 'FINAL: 72'})
        transcript = run_plan_execute(make_task(), self.workflow(Paradigm.PLAN_EXECUTE), planner, executor)
        self.eq(self.kinds(transcript), ['plan', 'final'])
        self.eq(self.agents(transcript), ['planner', 'executor'])
        assert '1. Add 48 and 24.\n2. Report the sum.' in executor.ledger[0].request.user_content
        self.eq(transcript.final_answer_y, 'FINAL: 72')

    def test_degenerate_plan(self):
        """
        An empty plan aborts the run before the executor is called.
        """
        planner = scripted({'planner/plan': '   '})
        executor = scripted({'executor/execute': 'FINAL: 72'})
        e = assert_raises(DegeneratePlanError, run_plan_execute, make_task(), self.workflow(Paradigm.PLAN_EXECUTE),
                          planner, executor)
        self.eq(executor.ledger, [])
        self.eq(e.transcript.status, TranscriptStatus.FAILED)
        self.eq(self.kinds(e.transcript), ['plan'])


class TestReflection(TestBaseClass):

    def test_three_calls(self):
        """
        Initial answer, feedback, revision; each stage sees what it needs.
        """
        reasoner = scripted({'reasoner/initial': 'It is 70.\nFINAL: 70'})
        reviser = scripted({'reviser/feedback': '48 + 24 is not 70.', 'reviser/revise': 'FINAL: 72'})
        transcript = run_reflection(make_task(), self.workflow(Paradigm.REFLECTION), reasoner, reviser)
        self.eq(self.kinds(transcript), ['candidate_answer', 'feedback', 'final'])
        feedback_request, revise_request = [e.request for e in reviser.ledger]
        assert 'It is 70.\nFINAL: 70' in feedback_request.user_content
        assert 'It is 70.\nFINAL: 70' in revise_request.user_content
        assert '48 + 24 is not 70.' in revise_request.user_content
        self.eq(transcript.final_answer_y, 'FINAL: 72')

    def test_single_call_mode(self):
        """
        One reviser call is split on the revision marker into feedback and final.
        """
        reasoner = scripted({'reasoner/initial': 'FINAL: 70'})
        reviser = scripted({'reviser/revise_single': 'Wrong sum.\nREVISION:\nFINAL: 72'},
                           tokens={'reviser/revise_single': (40, 9)})
        cfg = self.workflow(Paradigm.REFLECTION, reflection_single_call=True)
        transcript = run_reflection(make_task(), cfg, reasoner, reviser)
        self.eq(len(reviser.ledger), 1)
        self.eq(self.kinds(transcript), ['candidate_answer', 'feedback', 'final'])
        self.eq(transcript.messages[1].content, 'Wrong sum.')
        self.eq(transcript.final_answer_y, 'FINAL: 72')
        self.eq(transcript.messages[1].token_count + transcript.messages[2].token_count, 9)
        self.eq(transcript.flags, ())

    def test_single_call_without_marker(self):
        """
        Without the revision marker the whole reply is the final answer and the run is flagged.
        """
        reasoner = scripted({'reasoner/initial': 'FINAL: 70'})
        reviser = scripted({'reviser/revise_single': 'FINAL: 72'})
        cfg = self.workflow(Paradigm.REFLECTION, reflection_single_call=True)
        transcript = run_reflection(make_task(), cfg, reasoner, reviser)
        self.eq(self.kinds(transcript), ['candidate_answer', 'final'])
        self.eq(transcript.flags, ('revision_marker_missing',))

    @pytest.mark.parametrize('failing, kept', [
        ('reviser/feedback', ['candidate_answer']),
        ('reviser/revise', ['candidate_answer', 'feedback']),
    ])
    def test_failure_keeps_earlier_stages(self, failing, kept):
        """
        A reviser failure leaves a failed transcript holding every message produced before it.
        """
        entries = [ScriptEntry(reply='It is 70.\nFINAL: 70', key='reasoner/initial', prompt_tokens=10,
                               completion_tokens=5),
                   ScriptEntry(reply='48 + 24 is not 70.', key='reviser/feedback', prompt_tokens=10,
                               completion_tokens=5),
                   ScriptEntry(reply='FINAL: 72', key='reviser/revise', prompt_tokens=10, completion_tokens=5)]
        entries = [ScriptEntry(reply='', key=e.key, fail=True) if e.key == failing else e for e in entries]
        backend = ScriptedBackend('flaky', entries)
        e = assert_raises(WorkflowFailure, run_reflection, make_task(), self.workflow(Paradigm.REFLECTION),
                          backend, backend)
        self.eq(e.stage, failing)
        assert isinstance(e.cause, BackendTransportError)
        self.eq(e.transcript.status, TranscriptStatus.FAILED)
        assert e.transcript.failure.startswith(f'{failing}: '), e.transcript.failure
        self.eq(self.kinds(e.transcript), kept)
        self.eq(e.transcript.messages[0].content, 'It is 70.\nFINAL: 70')
        self.eq(e.transcript.total_cost_C, 5 * len(kept))


def _debaters(n, rounds):
    replies = {}
    for i in range(1, n + 1):
        for r in range(rounds + 1):
            replies[f'debater-{i}/r{r}'] = f'Agent {i} round {r}.\nFINAL: {i}{r}'
    return scripted(replies, name='debaters')


class TestInteractiveDebate(TestBaseClass):

    @pytest.mark.parametrize('n', [2, 3, 5])
    @pytest.mark.parametrize('rounds', [0, 1, 2, 3])
    def test_call_count(self, n, rounds):
        """
        N debaters over R update rounds make N(R+1)+1 calls with the aggregator.
        """
        debaters = scripted({'*': 'FINAL: 4'}, name='debaters')
        aggregator = scripted({'aggregator/aggregate': 'FINAL: 4'}, name='aggregator')
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=n, rounds=rounds)
        transcript = run_interactive_debate(make_task(), cfg, [debaters], aggregator)
        self.eq(len(debaters.ledger) + len(aggregator.ledger), n * (rounds + 1) + 1)
        self.eq(expected_calls(cfg), n * (rounds + 1) + 1)
        self.eq(len(transcript.messages), n * (rounds + 1) + 1)
        self.eq([m.round_r for m in transcript.messages[:-1]],
                [r for r in range(rounds + 1) for _ in range(n)])
        self.eq(transcript.messages[-1].kind, MessageKind.VERDICT)

    def test_round_barrier(self):
        """
        Round r prompts contain exactly the peers' round r-1 answers, never the agent's own.
        """
        n, rounds = 3, 2
        debaters = _debaters(n, rounds)
        aggregator = scripted({'aggregator/aggregate': 'FINAL: 12'})
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=n, rounds=rounds)
        transcript = run_interactive_debate(make_task(), cfg, [debaters], aggregator)

        for entry in debaters.ledger:
            request = entry.request
            r = int(request.stage[1:])
            if r == 0:
                assert 'answered' not in request.user_content
                continue
            own = int(request.agent_id.split('-')[1])
            for j in range(1, n + 1):
                line = f'Agent {j} answered: Agent {j} round {r - 1}.\nFINAL: {j}{r - 1}'
                if j == own:
                    assert f'Agent {j} answered' not in request.user_content
                else:
                    assert line in request.user_content, request.user_content
            assert f'round {r}.' not in request.user_content

        self.eq(self.agents(transcript)[:3], ['debater-1', 'debater-2', 'debater-3'])
        candidates = aggregator.ledger[0].request.user_content
        assert 'Agent 1 answered: Agent 1 round 2.\nFINAL: 12' in candidates

    def test_per_debater_backends(self):
        """
        Each debater can run on its own backend.
        """
        backends = [scripted({'*': f'FINAL: {c}'}, name=f'model-{c}') for c in 'AAB']
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=3, rounds=0,
                            aggregator_mode=AggregatorMode.DETERMINISTIC_MAJORITY)
        transcript = run_interactive_debate(make_task(), cfg, backends, None)
        self.eq([len(b.ledger) for b in backends], [1, 1, 1])
        self.eq(transcript.final_answer_y, 'FINAL: A')

    def test_sequence_script_under_latency_jitter(self):
        """
        A script replayed by position gives debater i the i-th reply whatever each call's latency.
        """
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=3, rounds=0,
                            aggregator_mode=AggregatorMode.DETERMINISTIC_MAJORITY)
        assignments = set()
        for _ in range(20):
            backend = JitteredBackend('jittered', [ScriptEntry(reply=f'FINAL: {c}', prompt_tokens=10,
                                                               completion_tokens=5) for c in 'ABC'],
                                      mode=ScriptMode.SEQUENCE)
            transcript = run_interactive_debate(make_task(), cfg, [backend], None)
            assignments.add(tuple((m.agent_id, m.content) for m in transcript.messages[:3]))
            self.eq([e.request.agent_id for e in backend.ledger], ['debater-1', 'debater-2', 'debater-3'])
        self.eq(assignments, {(('debater-1', 'FINAL: A'), ('debater-2', 'FINAL: B'), ('debater-3', 'FINAL: C'))})

    def test_backend_count_mismatch(self):
        """
        Two backends for three debaters is a contract violation.
        """
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=3)
        backends = [scripted({'*': 'FINAL: 1'}), scripted({'*': 'FINAL: 1'})]
        assert_raises(ContractViolation, run_interactive_debate, make_task(), cfg, backends,
                      scripted({'*': 'FINAL: 1'}))

    def test_deterministic_majority(self):
        """
        Deterministic aggregation makes no aggregator call and records a zero-cost verdict.
        """
        debaters = scripted({'debater-1/r0': 'FINAL: B', 'debater-2/r0': 'FINAL: A', 'debater-3/r0': 'final: b'})
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=3, rounds=0,
                            aggregator_mode=AggregatorMode.DETERMINISTIC_MAJORITY)
        transcript = run_interactive_debate(make_task(), cfg, [debaters], None)
        self.eq(expected_calls(cfg), 3)
        self.eq(len(debaters.ledger), 3)
        verdict = transcript.messages[-1]
        self.eq((verdict.kind, verdict.token_count, verdict.usage_source),
                (MessageKind.VERDICT, 0, UsageSource.NOT_GENERATED))
        self.eq(transcript.final_answer_y, 'FINAL: B')
        self.eq(transcript.total_cost_C, 15)

    def test_majority_tie_is_flagged(self):
        """
        A shared maximum goes to the first answer and the run is flagged.
        """
        debaters = scripted({'debater-1/r0': 'FINAL: C', 'debater-2/r0': 'FINAL: A'})
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=2, rounds=0,
                            aggregator_mode=AggregatorMode.DETERMINISTIC_MAJORITY)
        transcript = run_interactive_debate(make_task(), cfg, [debaters], None)
        self.eq(transcript.final_answer_y, 'FINAL: C')
        self.eq(transcript.flags, ('majority_tie',))

    def test_aggregator_fallback(self):
        """
        An aggregator reply without a final answer falls back to the majority vote.
        """
        debaters = scripted({'debater-1/r0': 'FINAL: A', 'debater-2/r0': 'FINAL: A', 'debater-3/r0': 'FINAL: B'})
        aggregator = scripted({'aggregator/aggregate': 'I cannot decide.'})
        cfg = self.workflow(Paradigm.INTERACTIVE_DEBATE, n_debaters=3, rounds=0)
        transcript = run_interactive_debate(make_task(), cfg, [debaters], aggregator)
        self.eq(transcript.flags, ('aggregator_fallback',))
        self.eq(self.kinds(transcript)[-2:], ['verdict', 'verdict'])
        self.eq(transcript.messages[-1].token_count, 0)
        self.eq(transcript.final_answer_y, 'FINAL: A')


class TestAdversarialDebate(TestBaseClass):

    @pytest.mark.parametrize('rounds', [0, 1, 2, 3])
    def test_alternation(self, rounds):
        """
        Affirmative and negative alternate and every turn answers the previous one; the judge speaks last.
        """
        replies = {}
        for r in range(rounds + 1):
            replies[f'affirmative/r{r}'] = f'Affirmative round {r}.\nFINAL: 72'
            replies[f'negative/r{r}'] = f'Negative round {r}.\nFINAL: 70'
        debaters = scripted(replies)
        judge = scripted({'judge/verdict': 'The affirmative is right.\nFINAL: 72'})
        cfg = self.workflow(Paradigm.ADVERSARIAL_DEBATE, rounds=rounds)
        transcript = run_adversarial_debate(make_task(), cfg, debaters, debaters, judge)

        self.eq(self.agents(transcript), ['affirmative', 'negative'] * (rounds + 1) + ['judge'])
        self.eq(len(debaters.ledger) + len(judge.ledger), expected_calls(cfg))
        previous = None
        for entry in debaters.ledger:
            if previous is not None:
                assert previous in entry.request.user_content
            previous = replies[entry.key]
        verdict_prompt = judge.ledger[0].request.user_content
        for reply in replies.values():
            assert reply in verdict_prompt
        self.eq(transcript.final_answer_y, 'The affirmative is right.\nFINAL: 72')

    def test_judge_failure_keeps_exchanges(self):
        """
        A judge that cannot answer fails the debate; every exchange before the verdict is kept.
        """
        debaters = scripted({'affirmative/r0': 'FINAL: 72', 'negative/r0': 'FINAL: 70',
                             'affirmative/r1': 'Still 72.\nFINAL: 72', 'negative/r1': 'Still 70.\nFINAL: 70'})
        judge = ScriptedBackend('judge', [ScriptEntry(reply='', key='judge/verdict', fail=True)])
        cfg = self.workflow(Paradigm.ADVERSARIAL_DEBATE, rounds=1)
        e = assert_raises(WorkflowFailure, run_adversarial_debate, make_task(), cfg, debaters, debaters, judge)
        self.eq(e.stage, 'judge/verdict')
        self.eq(e.transcript.status, TranscriptStatus.FAILED)
        assert e.transcript.failure.startswith('judge/verdict: '), e.transcript.failure
        self.eq(self.agents(e.transcript), ['affirmative', 'negative', 'affirmative', 'negative'])
        self.eq([m.content for m in e.transcript.messages],
                ['FINAL: 72', 'FINAL: 70', 'Still 72.\nFINAL: 72', 'Still 70.\nFINAL: 70'])
        self.eq(len(judge.ledger), 1)


class TestRunWorkflow(TestBaseClass):

    def test_missing_role_binding(self):
        """
        Every role of the paradigm needs a backend.
        """
        assert_raises(ContractViolation, run_workflow, make_task(), self.workflow(Paradigm.PLAN_EXECUTE),
                      {'planner': scripted({'*': 'x'})})

    def test_fixture_workflows(self):
        """
        The shipped script drives every paradigm to 'FINAL: 72'.
        """
        for paradigm in Paradigm:
            backend = load_scripted_backend(SCRIPTS_PATH / 'model_a.jsonl')
            cfg = self.workflow(paradigm)
            transcript = run_workflow(make_task(), cfg, {role: backend for role in cfg.roles})
            self.eq(extract_final(transcript.final_answer_y), '72')
            self.eq(len(backend.ledger), expected_calls(cfg))

    @pytest.mark.parametrize('paradigm, kwargs, calls', [
        (Paradigm.SINGLE_DIRECT, {}, 1),
        (Paradigm.SINGLE_COT, {}, 1),
        (Paradigm.PLAN_EXECUTE, {}, 2),
        (Paradigm.REFLECTION, {}, 3),
        (Paradigm.REFLECTION, {'reflection_single_call': True}, 2),
    ])
    def test_call_count(self, paradigm, kwargs, calls):
        """
        The sequential paradigms make exactly their fixed number of backend calls.
        """
        backend = scripted({'*': 'Check the sum.\nREVISION:\nFINAL: 72'})
        cfg = self.workflow(paradigm, **kwargs)
        run_workflow(make_task(), cfg, {role: backend for role in cfg.roles})
        self.eq(len(backend.ledger), calls)
        self.eq(expected_calls(cfg), calls)


class TestTranscriptCost(TestBaseClass):

    def test_sum_of_messages(self):
        """
        Cost is the plain sum of message token counts.
        """
        transcript = Transcript(task_id='t', workflow={}, final_answer_y='message 3', total_cost_C=545,
                                wall_time=timedelta(seconds=1),
                                messages=(_message(1, 'reasoner', 120), _message(2, 'reviser', 340),
                                          _message(3, 'reviser', 85, UsageSource.LOCAL_ESTIMATE)))
        cost = transcript_cost(transcript)
        self.eq(cost.total, 545)
        self.eq(cost.per_role, {'reasoner': 120, 'reviser': 425})
        self.eq(cost.estimated_tokens, 85)
        self.almost_eq(cost.estimated_fraction, 85 / 545)
        self.eq(cost.uses_estimates, True)

    def test_random_token_assignments(self):
        """
        For random completion token counts the transcript cost equals the sum over its calls.
        """
        rnd = random.Random(2024)
        paradigms = list(Paradigm)
        for _ in range(1000):
            paradigm = rnd.choice(paradigms)
            kwargs = {'rounds': rnd.randint(0, 2)}
            if paradigm is Paradigm.INTERACTIVE_DEBATE:
                kwargs['n_debaters'] = rnd.randint(2, 3)
            if paradigm is Paradigm.REFLECTION:
                kwargs['reflection_single_call'] = rnd.random() < 0.5
            cfg = self.workflow(paradigm, **kwargs)

            counts = [rnd.randint(0, 500) for _ in range(12)]
            backend = ScriptedBackend('rnd', [ScriptEntry(reply='Steps.\nREVISION:\nFINAL: 1', prompt_tokens=1,
                                                          completion_tokens=c) for c in counts],
                                      mode=ScriptMode.SEQUENCE)
            transcript = run_workflow(make_task(), cfg, {role: backend for role in cfg.roles})
            calls = expected_calls(cfg)
            self.eq(len(backend.ledger), calls)
            self.eq(transcript.total_cost_C, sum(counts[:calls]))
            self.eq(transcript_cost(transcript).total, transcript.total_cost_C)

    def test_estimated_usage_is_reported(self):
        """
        Estimated usage is kept apart in the breakdown.
        """
        backend = load_scripted_backend(SCRIPTS_PATH / 'model_b.jsonl')
        transcript = run_single_model(make_task(), self.workflow(Paradigm.SINGLE_DIRECT), backend)
        cost = transcript_cost(transcript)
        self.eq(cost.estimated_tokens, cost.total)
        self.eq(cost.estimated_fraction, 1.0)

    def test_record_round_trip(self):
        """
        A persisted transcript reads back equal.
        """
        backend = load_scripted_backend(SCRIPTS_PATH / 'model_a.jsonl')
        transcript = run_single_model(make_task(), self.workflow(Paradigm.SINGLE_COT), backend)
        restored = Transcript.from_record(transcript.to_record())
        self.eq(restored.messages, transcript.messages)
        self.eq(restored.final_answer_y, transcript.final_answer_y)
        self.eq(restored.total_cost_C, 30)
        self.eq(restored.workflow, transcript.workflow)
