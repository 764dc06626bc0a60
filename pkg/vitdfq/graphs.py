import math
import matplotlib
import matplotlib.pyplot as plt
from matplotlib.lines import Line2D

from . import utils

matplotlib.use('Agg')


class Colors:
    sources = {'noise': '#8ecae6', 'generated': '#DC7F2E', 'real': '#023047'}
    losses = {'total': 'k', 'pse': '#AF4831', 'one_hot': '#126782', 'tv': '#219ebc'}


class DensityGraphs:
    def __init__(self, n_cols=4):
        self.n_cols = n_cols

    def layer(self, curves: dict, ax=None, title=None, legend=False):
        """ curves: source name -> DensityCurve of one layer """
        if ax is None:
            fig, ax = plt.subplots()

        for source, curve in curves.items():
            color = Colors.sources.get(source, None)
            ax.plot(curve.grid, curve.density, color=color, label=source)
            ax.fill_between(curve.grid, curve.density, color=color, alpha=0.2)

        if title:
            ax.set_title(title)
        if legend:
            handles = [Line2D([0], [0], color=Colors.sources.get(s), label=s) for s in curves]
            ax.legend(handles=handles, fontsize=8)
        ax.set_xlim(-1.2, 1.2)
        ax.grid()
        return ax

    def all_layers(self, curves_by_source: dict):
        """ curves_by_source: source name -> {layer: DensityCurve} """
        layers = sorted(next(iter(curves_by_source.values())))
        n_rows = math.ceil(len(layers) / self.n_cols)
        fig, axes = plt.subplots(nrows=n_rows, ncols=self.n_cols, sharex=True, figsize=(3 * self.n_cols, 2.5 * n_rows),
                                 squeeze=False)
        axes = axes.ravel()
        for i, layer in enumerate(layers):
            self.layer({s: c[layer] for s, c in curves_by_source.items()}, ax=axes[i], title=f"layer {layer}",
                       legend=(i == 0))
        for ax in axes[len(layers):]:
            ax.set_visible(False)
        fig.supxlabel('patch similarity')
        fig.supylabel('density')
        plt.tight_layout()
        return fig

    @staticmethod
    def loss_history(history, ax=None):
        if ax is None:
            fig, ax = plt.subplots()
        for column, color in Colors.losses.items():
            ax.plot(history['step'], history[column], color=color, label=column)
        ax.set_xlabel('step')
        ax.set_ylabel('loss')
        ax.legend()
        ax.grid()
        return ax

    @staticmethod
    def samples(images, labels, n_cols=8):
        imgs = utils.rescale_to_unit(images)
        n_rows = math.ceil(len(imgs) / n_cols)
        fig, axes = plt.subplots(nrows=n_rows, ncols=n_cols, figsize=(1.5 * n_cols, 1.6 * n_rows), squeeze=False)
        axes = axes.ravel()
        for i, ax in enumerate(axes):
            ax.axis('off')
            if i < len(imgs):
                ax.imshow(imgs[i].transpose(1, 2, 0))
                ax.set_title(str(int(labels[i])), fontsize=8)
        plt.tight_layout()
        return fig


def save(fig, path):
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
