# Object-hallucination detection for generated image captions
