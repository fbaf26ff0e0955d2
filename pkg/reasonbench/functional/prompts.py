"""
Prompt templates.

Role prompts are the system prompts an agent runs under; stage templates
build the user content of one call. Both are plain data and can be
overridden from the run config (prompt.<role> / template.<stage>).
"""
from string import Formatter
from typing import Dict, FrozenSet

from reasonbench.functional.errors import ConfigError

FINAL_MARKER = 'FINAL:'
REVISION_MARKER = 'REVISION:'

_ANSWER_FORMAT = f"End your reply with a line of the form '{FINAL_MARKER} <answer>'."

ROLE_PROMPTS: Dict[str, str] = {
    'solver': 'You are a careful problem solver.',
    'planner': 'You are a planner. You break problems into short, concrete steps and never solve them yourself.',
    'executor': 'You are an executor. You follow the given plan faithfully to solve the problem.',
    'reasoner': 'You are a careful problem solver.',
    'reviser': 'You are a reviewer. You find mistakes in proposed solutions and correct them.',
    'debater': 'You are one of several agents debating a problem. You reason independently but take '
               'other agents\' answers into account.',
    'aggregator': 'You collect the answers of several agents and report the one given most often.',
    'affirmative': 'You are the affirmative side of a debate. You propose and defend a solution.',
    'negative': 'You are the negative side of a debate. You challenge the opposing solution and offer a '
                'counter-solution.',
    'judge': 'You are the judge of a debate. You read the whole debate and decide the final answer.',

    # evaluation roles, never part of a workflow.
    'grader': 'You are a strict grader. You compare a model output against a reference answer.',
    'code_extractor': 'You extract source code from text. You never modify or complete the code.',
    'option_writer': 'You write multiple-choice options for reading-comprehension questions.',
    'criteria_writer': 'You are an experienced exam designer. You write precise evaluation criteria.',
    'option_grader': 'You are a strict exam reviewer. You score options against a criterion.',
}

STAGE_TEMPLATES: Dict[str, str] = {
    'solve': '{input}\n\n' + _ANSWER_FORMAT,

    'plan': 'Problem:\n{input}\n\nWrite a numbered, step-by-step plan for solving this problem. '
            'Do not solve it.',
    'execute': 'Problem:\n{input}\n\nPlan:\n{plan}\n\nFollow the plan to solve the problem. ' + _ANSWER_FORMAT,

    'initial': '{input}\n\nSolve the problem. ' + _ANSWER_FORMAT,
    'feedback': 'Problem:\n{input}\n\nProposed solution:\n{answer}\n\nCritique the proposed solution. '
                'Point out every error you find. Do not write a corrected solution.',
    'revise': 'Problem:\n{input}\n\nProposed solution:\n{answer}\n\nFeedback:\n{feedback}\n\n'
              'Write a corrected solution that addresses the feedback. ' + _ANSWER_FORMAT,
    'revise_single': 'Problem:\n{input}\n\nProposed solution:\n{answer}\n\nFirst critique the proposed '
                     f"solution, then write a line '{REVISION_MARKER}' followed by the corrected solution. "
                     + _ANSWER_FORMAT,

    'debate_initial': '{input}\n\nSolve the problem. ' + _ANSWER_FORMAT,
    'debate_update': 'Problem:\n{input}\n\nAnswers from the other agents in the previous round:\n{peers}\n\n'
                     'Use these answers as additional advice and give your updated answer. ' + _ANSWER_FORMAT,
    'aggregate': 'Problem:\n{input}\n\nCandidate answers:\n{candidates}\n\n'
                 f"Select the answer that occurs most often. Reply with '{FINAL_MARKER} <answer>'.",

    'affirmative_open': '{input}\n\nPropose a solution and argue for it. ' + _ANSWER_FORMAT,
    'negative_open': 'Problem:\n{input}\n\nThe affirmative side proposed:\n{opponent}\n\n'
                     'Argue against this solution and give your counter-solution. ' + _ANSWER_FORMAT,
    'affirmative_rebut': 'Problem:\n{input}\n\nThe negative side argued:\n{opponent}\n\n'
                         'Rebut this argument and defend or refine your solution. ' + _ANSWER_FORMAT,
    'negative_rebut': 'Problem:\n{input}\n\nThe affirmative side argued:\n{opponent}\n\n'
                      'Rebut this argument and defend or refine your counter-solution. ' + _ANSWER_FORMAT,
    'verdict': 'Problem:\n{input}\n\nDebate transcript:\n{transcript}\n\n'
               f"Decide which solution is correct. Reply with '{FINAL_MARKER} <answer>'.",

    # evaluation.
    'equivalence': 'Reference answer:\n{ground_truth}\n\nModel output:\n{output}\n\n'
                   'Decide whether the final answer in the model output is equivalent to the reference '
                   'answer. Equivalent forms (e.g. 1/2 and 0.5, or an option letter and its text) count '
                   'as equivalent. Put a single word on the last line: CORRECT or INCORRECT.',
    'equivalence_strict': 'Reference answer:\n{ground_truth}\n\nModel output:\n{output}\n\n'
                          'Is the final answer in the model output equivalent to the reference answer? '
                          'Reply with exactly one word and nothing else: CORRECT or INCORRECT.',
    'extract_code': 'Extract the complete, executable Python solution from the text below. Reply with only '
                    'the code inside a single ```python fenced block, or with NONE if there is no code.\n\n'
                    '{output}',

    # mimebench.
    'mime_generate': 'Passage:\n{passage}\n\nQuestion:\n{question}\n\n{constraints}'
                     'Write four options for this main-idea question. Option A must state the main idea '
                     'correctly; options B, C and D must be plausible but wrong distractors.\n'
                     'Output format:\nA. <correct option>\nB. <distractor>\nC. <distractor>\nD. <distractor>',
    'mime_generate_strict': 'Passage:\n{passage}\n\nQuestion:\n{question}\n\n{constraints}'
                            'Write four options: A is the correct main idea, B, C and D are distractors. '
                            "Your previous reply did not follow the format. Output exactly four lines "
                            "starting with 'A.', 'B.', 'C.' and 'D.' and nothing else.",
    'criteria_correct_option': 'Passage:\n{passage}\n\nExpert-written reference options:\n{references}\n\n'
                               'Write one evaluation criterion for judging a newly generated CORRECT '
                               'main-idea option for this passage: what must it capture, and what would '
                               'make it trivially easy or inaccurate?',
    'criteria_distractor': 'Passage:\n{passage}\n\nExpert-written reference options:\n{references}\n\n'
                           'Write one evaluation criterion for judging a newly generated DISTRACTOR option '
                           'for this passage: what makes a distractor misleading yet clearly wrong and '
                           'internally consistent?',
    'option_judge': 'Passage:\n{passage}\n\nCriterion:\n{criterion}\n\nOption ({option_kind}):\n{option}\n\n'
                    'Score the option under the criterion on three dimensions: fluency (0-{w_fluency}), '
                    'confusability (0-{w_confusability}) and {third} (0-{w_third}). Reply with four lines:\n'
                    'fluency: <score>\nconfusability: <score>\n{third}: <score>\ntotal: <sum of the three>',
    'option_judge_strict': 'Passage:\n{passage}\n\nCriterion:\n{criterion}\n\nOption ({option_kind}):\n'
                           '{option}\n\nYour previous scores were malformed or did not add up. Reply with '
                           'exactly four lines and nothing else:\nfluency: <0-{w_fluency}>\n'
                           'confusability: <0-{w_confusability}>\n{third}: <0-{w_third}>\n'
                           'total: <exact sum of the three>',
}


def template_fields(template: str) -> FrozenSet[str]:
    return frozenset(name for _, name, _, _ in Formatter().parse(template) if name)


REQUIRED_FIELDS: Dict[str, FrozenSet[str]] = {stage: template_fields(t) for stage, t in STAGE_TEMPLATES.items()}


def check_template(stage: str, template: str, field_path: str) -> None:
    """An override must condition on at least what the default template does."""
    if stage not in STAGE_TEMPLATES:
        raise ConfigError(field_path, f"unknown template stage '{stage}'")
    missing = REQUIRED_FIELDS[stage] - template_fields(template)
    if missing:
        raise ConfigError(field_path, f"template drops required field(s) {sorted(missing)}")


def render(template: str, **fields) -> str:
    return template.format_map(fields)
