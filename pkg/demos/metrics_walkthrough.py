"""
Correlation metrics
===================

Matthews correlation for K classes from a confusion matrix, and the per-track
Pearson correlation used for scoring profile predictions.
"""
import numpy as np

from spacemoe.metrics import confusion_matrix, mcc_binary, mcc_multiclass, mcc_multiclass_triple_sum, pearson

labels = np.array([0, 0, 1, 1, 2, 2, 2, 1])
preds = np.array([0, 1, 1, 1, 2, 0, 2, 1])
C = confusion_matrix(labels, preds, 3)
print("confusion matrix (rows = truth)\n", C)
print("MCC closed form ", mcc_multiclass(C))
print("MCC triple sum  ", mcc_multiclass_triple_sum(C))

# with two classes it is the familiar binary coefficient
tp, tn, fp, fn = 40, 45, 5, 10
print("\nbinary", mcc_binary(tp, tn, fp, fn), " via 2x2 matrix", mcc_multiclass([[tn, fp], [fn, tp]]))
print("perfect", mcc_multiclass(np.diag([3, 4])), " inverted", mcc_multiclass([[0, 3], [4, 0]]),
      " uninformative", mcc_multiclass(np.full((3, 3), 2)))

a = np.array([1.0, 2, 3, 4])
b = np.array([2.0, 4, 5, 9])
print("\nPearson", pearson(a, b), "=", 11 / np.sqrt(130))
print("constant prediction has no correlation:", pearson(a, np.ones(4)))
