"""Test doubles shared by the pipeline and acceptance suites."""

from mrag.errors import ProviderError
from mrag.genclient import Provider, _digest_seed


class Regurgitate(Provider):
    """Answers every request with the target image's own reference captions.

    The provider only sees the prompt, so the image is recovered from the per-image
    request seed that ``caption`` derives from ``(seed, image_id)``.
    """

    def __init__(self, refs: dict, seed: int = 0, max_iters: int = 10):
        super().__init__()
        self.refs = refs
        self.by_seed = {}
        batch_seeds = [seed] + [_digest_seed(seed, "iter", it) for it in range(1, max_iters + 1)]
        for s in batch_seeds:
            for image_id in refs:
                self.by_seed[_digest_seed(s, image_id) % 2 ** 31] = image_id

    def _generate(self, request):
        caps = self.refs[self.by_seed[request.seed]]
        return [caps[j % len(caps)] for j in range(request.num_samples)]


class FailAfter(Provider):
    """Delegates to ``inner`` for ``n`` generate calls, then fails."""

    def __init__(self, inner: Provider, n: int):
        super().__init__()
        self.inner = inner
        self.left = n

    def _generate(self, request):
        if self.left <= 0:
            raise ProviderError("provider went away")
        self.left -= 1
        return self.inner.generate(request).texts
