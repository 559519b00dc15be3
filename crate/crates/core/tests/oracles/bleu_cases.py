# Independent BLEU values for the ten-case suite (nltk corpus_bleu, 4-gram, unsmoothed).
import json, warnings
from nltk.translate.bleu_score import corpus_bleu
warnings.filterwarnings("ignore")
cases = [
  (["the cat sat on the mat"], ["the cat sat on the mat"]),
  (["the cat sat on a mat"], ["the cat sat on the mat"]),
  (["a cat sat on the mat today"], ["the cat sat on the mat"]),
  (["the cat sat on"], ["the cat sat on the mat"]),
  (["The cat sat on the mat"], ["the cat sat on the mat"]),
  (["the cat sat on the mat", "a dog ran in the big park"], ["the cat sat on the mat", "the dog ran in the park"]),
  (["he read the book because he was interested in world history", "it is a guide to action"],
   ["he was interested in world history because he read the book", "it is a guide to action that ensures"]),
  (["one two three four five six seven eight", "one two three four"], ["one two three four five six seven nine", "one two three four five"]),
  (["x y z w x y z w x y"], ["x y z w q x y z w"]),
  (["a b c d e f g h i j k l", "m n o p", "q r s t u"], ["a b c d e f g x i j k l", "m n o p q", "q r s t"]),
]
out = []
for hyps, refs in cases:
    h = [s.split() for s in hyps]; r = [[s.split()] for s in refs]
    out.append({"hyp": hyps, "ref": refs, "bleu": 100 * corpus_bleu(r, h)})
print(json.dumps(out, indent=1))
