"""Model-adaptive prompt optimization.

Rewrites task prompts into prompts a specific target language model prefers.
The pipeline has three stages: warm-up dataset construction (candidate
paraphrases scored against references), supervised fine-tuning of a prompt
rewriter, and reinforcement learning against a learned pairwise reward model
with a joint PPO + RRMF objective.
"""

__version__ = "0.1.0"
