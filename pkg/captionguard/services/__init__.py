# Services implementing labeling, featurization, training and evaluation
