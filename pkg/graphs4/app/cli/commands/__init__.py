from . import evaluate, finetune, gradcheck, pretrain, score, screen, synth

# Subcommands in pipeline order
COMMANDS = (synth, pretrain, screen, score, finetune, evaluate, gradcheck)
